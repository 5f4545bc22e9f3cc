use invrat::datagen::*;
use invrat::game::*;
use invrat::tape::Tape;

// Per-token-class mean selection probability on the validation split.
fn class_probs(model: &GameModel, corpus: &Corpus, config: &GameConfig) -> (f64, f64, f64) {
    let rows: Vec<&Example> = corpus.split_examples(Split::Val).take(400).collect();
    let batch = Batch::from_examples(&rows, false);
    let mut fp = ForwardPass::new(model);
    let scores = fp.scores(&batch).unwrap();
    let probs_node = fp.tape.sigmoid(scores);
    let pv = fp.tape.value(probs_node).data().to_vec();
    let (mut pb, mut nb) = (0.0, 0usize);
    let (mut pc, mut nc) = (0.0, 0usize);
    let (mut pf, mut nf) = (0.0, 0usize);
    for (bi, ex) in rows.iter().enumerate() {
        for (pos, &tok) in ex.tokens.iter().enumerate() {
            let p = pv[bi * batch.n + pos];
            if corpus.bias_token_ids.contains(&tok) { pb += p; nb += 1; }
            else if ex.truth_mask[pos] { pc += p; nc += 1; }
            else { pf += p; nf += 1; }
        }
    }
    (pb / nb as f64, pc / nc as f64, pf / nf.max(1) as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(400);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let lambda: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let mu1: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let mu2: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let batch: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(64);
    let gen_scale: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.2);
    let chunks: usize = 8;

    let corpus = gen_bias_corpus(&BiasInjectionConfig {
        examples_per_env: 2000, val_examples: 1000, test_examples: 2000, seed: 11,
        ..Default::default()
    }).unwrap();
    let per = steps / chunks;
    let config = GameConfig {
        lambda_inv: lambda, steps: per, batch_size: batch, learning_rate: lr,
        generator_lr_scale: gen_scale,
        alpha_sparsity: 0.1, mu1, mu2, seed: 11, ..Default::default()
    };
    let mut model = GameModel::for_corpus(&corpus, &config);
    println!("steps={steps} lr={lr} lambda={lambda} mu1={mu1} mu2={mu2} batch={batch} gen_scale={gen_scale}");
    for c in 0..chunks {
        let out = train(&mut model, &corpus, &config).unwrap();
        let last = out.trace.last().unwrap();
        let (pb, pc, pf) = class_probs(&model, &corpus, &config);
        println!("after {:4} steps: p(bias)={pb:.3} p(causal)={pc:.3} p(filler)={pf:.3} li={:.3} le={:.3}",
                 (c + 1) * per, last.l_i, last.l_e);
    }
    let _ = Tape::new();
}
