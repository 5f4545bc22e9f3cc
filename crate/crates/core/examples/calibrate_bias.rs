use invrat::datagen::*;
use invrat::eval;
use invrat::game::*;

fn main() {
    // args: steps lr lambdas mu1s seeds
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(500);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let lambdas: Vec<f64> = args.get(3).map(|s| s.split(',').map(|v| v.parse().unwrap()).collect()).unwrap_or(vec![0.0, 4.0]);
    let mu1s: Vec<f64> = args.get(4).map(|s| s.split(',').map(|v| v.parse().unwrap()).collect()).unwrap_or(vec![1.0]);
    let seeds: Vec<u64> = args.get(5).map(|s| s.split(',').map(|v| v.parse().unwrap()).collect()).unwrap_or(vec![11]);
    let alpha: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let batch: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(128);
    let gen_scale: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(0.2);

    for seed in &seeds {
        let corpus = gen_bias_corpus(&BiasInjectionConfig {
            examples_per_env: 2000,
            val_examples: 1000,
            test_examples: 2000,
            seed: *seed,
            ..Default::default()
        }).unwrap();
        for mu1 in &mu1s {
            for lambda in &lambdas {
                let config = GameConfig {
                    lambda_inv: *lambda,
                    steps,
                    batch_size: batch,
                    learning_rate: lr,
                    generator_lr_scale: gen_scale,
                    alpha_sparsity: alpha,
                    mu1: *mu1,
                    mu2: 0.1,
                    seed: *seed,
                    ..Default::default()
                };
                let t0 = std::time::Instant::now();
                let mut model = GameModel::for_corpus(&corpus, &config);
                let outcome = train(&mut model, &corpus, &config).unwrap();
                let dt = t0.elapsed();
                let report = eval::build_report(&model, &corpus, Split::Test, &config).unwrap();
                let last = outcome.trace.last().unwrap();
                let val_rows: Vec<&Example> = corpus.split_examples(Split::Val).collect();
                let spars = mean_selection_probability(&model, &val_rows, &config).unwrap();
                println!(
                    "seed {seed} mu1 {mu1} lambda {lambda}: test_acc={:.3} dev_acc={:.3} bias_rate={:.3} gap_test={:+.3} li={:.3} le={:.3} sel_prob={:.3} ({:.1?})",
                    report.accuracy, report.dev_accuracy,
                    report.bias_highlighted.unwrap(),
                    report.invariance_gap.unwrap(),
                    last.l_i, last.l_e, spars, dt,
                );
            }
        }
    }
}
