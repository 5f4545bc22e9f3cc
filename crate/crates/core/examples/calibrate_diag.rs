use invrat::datagen::*;
use invrat::eval;
use invrat::game::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let lambda: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(16.0);
    let alpha: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(11);
    let gen_scale: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.2);

    let corpus = gen_bias_corpus(&BiasInjectionConfig {
        examples_per_env: 2000, val_examples: 1000, test_examples: 2000, seed,
        ..Default::default()
    }).unwrap();
    let config = GameConfig {
        lambda_inv: lambda, steps, batch_size: 128, learning_rate: lr,
        generator_lr_scale: gen_scale, alpha_sparsity: alpha, mu1: 10.0, mu2: 0.1,
        seed, ..Default::default()
    };
    let mut model = GameModel::for_corpus(&corpus, &config);
    let out = train(&mut model, &corpus, &config).unwrap();
    let last = out.trace.last().unwrap();

    // deterministic selection rates by token id on the test split
    let rows: Vec<&Example> = corpus.split_examples(Split::Test).collect();
    let mut sel_count = vec![0usize; corpus.vocab.len()];
    let mut tok_count = vec![0usize; corpus.vocab.len()];
    let mut correct_by_env = [0usize; 2];
    let mut count_by_env = [0usize; 2];
    for chunk in rows.chunks(256) {
        let batch = Batch::from_examples(chunk, false);
        let pred = predict(&model, &batch, &config).unwrap();
        for (bi, ex) in chunk.iter().enumerate() {
            for (pos, &tok) in ex.tokens.iter().enumerate() {
                tok_count[tok as usize] += 1;
                if pred.masks[bi][pos] { sel_count[tok as usize] += 1; }
            }
            let env = ex.env_for_eval().unwrap() as usize;
            count_by_env[env] += 1;
            if pred.labels[bi] == ex.label { correct_by_env[env] += 1; }
        }
    }
    println!("lambda={lambda} alpha={alpha} li={:.3} le={:.3}", last.l_i, last.l_e);
    for (t, name) in corpus.vocab.iter().enumerate() {
        if tok_count[t] > 0 {
            println!("  '{name}': sel {:4.1}% ({} occurrences)", 100.0 * sel_count[t] as f64 / tok_count[t] as f64, tok_count[t]);
        }
    }
    let report = eval::build_report(&model, &corpus, Split::Test, &config).unwrap();
    println!("test_acc={:.3} (env0 {:.3}, env1 {:.3}) bias_rate={:.3} gap={:+.3}",
        report.accuracy,
        correct_by_env[0] as f64 / count_by_env[0] as f64,
        correct_by_env[1] as f64 / count_by_env[1] as f64,
        report.bias_highlighted.unwrap(), report.invariance_gap.unwrap());
}
