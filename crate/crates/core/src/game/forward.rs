//! Tape graphs for one forward/backward pass of the game.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Batch, ConstraintMode, GameConfig, GameError, GameModel, HKind};
use crate::tape::{Array, NodeId, ParamStore, Tape};

/// Score offset applied to padded positions so they can never win the
/// argmax nor receive soft selection mass.
const PAD_PENALTY: f64 = 1e9;

/// Position scores are bounded to `(-SCORE_BOUND, SCORE_BOUND)` by a
/// tanh. Unbounded scores saturate the selection sigmoid, killing the
/// gradient that would let the generator revise an entrenched mask.
const SCORE_BOUND: f64 = 4.0;

/// One mask draw: the binary forward-pass value plus the node whose
/// backward rule routes gradients through the soft surrogate.
pub struct MaskSample {
    /// The hard binary mask, exactly what the predictors see.
    pub hard: Array,
    /// Straight-through node on the tape.
    pub node: NodeId,
    /// Fraction of selected positions in `hard`.
    pub mean_sparsity: f64,
    /// Hard mode only: chosen window start per row.
    pub starts: Option<Vec<usize>>,
}

/// Builder for the per-phase computation graph. Parameters of all three
/// players are re-leafed onto a fresh tape; gradient extraction is by
/// player, so each training phase updates exactly one parameter store.
pub struct ForwardPass<'m> {
    pub tape: Tape,
    model: &'m GameModel,
    gen_ids: Vec<NodeId>,
    fi_ids: Vec<NodeId>,
    fe_ids: Vec<NodeId>,
}

fn leaf_store(tape: &mut Tape, store: &ParamStore) -> Vec<NodeId> {
    (0..store.len())
        .map(|i| tape.leaf(store.value(i).clone()))
        .collect()
}

impl<'m> ForwardPass<'m> {
    pub fn new(model: &'m GameModel) -> Self {
        let mut tape = Tape::new();
        let gen_ids = leaf_store(&mut tape, &model.generator);
        let fi_ids = leaf_store(&mut tape, &model.f_i);
        let fe_ids = leaf_store(&mut tape, &model.f_e);
        ForwardPass {
            tape,
            model,
            gen_ids,
            fi_ids,
            fe_ids,
        }
    }

    fn param(&self, ids: &[NodeId], store: &ParamStore, name: &str) -> NodeId {
        ids[store.index_of(name).expect("known parameter name")]
    }

    /// Per-position generator scores `[B, N]`: each token's embedding is
    /// concatenated with its width-3 neighborhood and scored by a
    /// one-hidden-layer network. Padded positions are pushed to a large
    /// negative score.
    pub fn scores(&mut self, batch: &Batch) -> Result<NodeId, GameError> {
        let embed = self.param(&self.gen_ids, &self.model.generator, "embed");
        let w1 = self.param(&self.gen_ids, &self.model.generator, "w1");
        let b1 = self.param(&self.gen_ids, &self.model.generator, "b1");
        let w2 = self.param(&self.gen_ids, &self.model.generator, "w2");
        let b2 = self.param(&self.gen_ids, &self.model.generator, "b2");

        let t = &mut self.tape;
        let emb = t.embed(embed, &batch.tokens, &[batch.b, batch.n])?;
        let prev = t.shift_seq(emb, 1)?;
        let next = t.shift_seq(emb, -1)?;
        let pair = t.concat_last(prev, emb)?;
        let ctx = t.concat_last(pair, next)?;
        let pre = t.affine(w1, b1, ctx)?;
        let hidden = t.tanh(pre);
        let raw3 = t.affine(w2, b2, hidden)?;
        let raw = t.reshape(raw3, &[batch.b, batch.n])?;
        let squashed = t.scale(raw, 1.0 / SCORE_BOUND);
        let unit = t.tanh(squashed);
        let bounded = t.scale(unit, SCORE_BOUND);

        let penalty: Vec<f64> = batch.pad.iter().map(|p| (p - 1.0) * PAD_PENALTY).collect();
        let pen = t.leaf(Array::from_vec(&[batch.b, batch.n], penalty)?);
        Ok(t.add(bounded, pen)?)
    }

    /// Draws the rationale mask. Hard mode selects one contiguous window
    /// of `rationale_len` ones starting at the argmax score (lowest index
    /// wins ties, start clipped so the window fits); soft mode samples
    /// per-token Bernoulli selections from sigmoid scores. Both route
    /// gradients through their soft surrogate.
    pub fn generate_mask(
        &mut self,
        batch: &Batch,
        config: &GameConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<MaskSample, GameError> {
        config.validate(batch.n)?;
        let scores = self.scores(batch)?;
        match config.constraint_mode {
            ConstraintMode::Hard => self.hard_mask(batch, config, scores),
            ConstraintMode::Soft => self.soft_mask(batch, scores, rng),
        }
    }

    fn hard_mask(
        &mut self,
        batch: &Batch,
        config: &GameConfig,
        scores: NodeId,
    ) -> Result<MaskSample, GameError> {
        let l = config.rationale_len;
        let t = &mut self.tape;
        let sv = t.value(scores).data().to_vec();
        let mut hard = vec![0.0; batch.b * batch.n];
        let mut starts = Vec::with_capacity(batch.b);
        for bi in 0..batch.b {
            let row = &sv[bi * batch.n..(bi + 1) * batch.n];
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            let real_len = batch.pad[bi * batch.n..(bi + 1) * batch.n]
                .iter()
                .filter(|p| **p > 0.0)
                .count()
                .max(l);
            let start = best.min(real_len - l);
            for k in start..start + l {
                hard[bi * batch.n + k] = 1.0;
            }
            starts.push(start);
        }
        let soft = t.softmax(scores)?;
        let spread = t.causal_conv_allones(soft, l)?;
        let hard = Array::from_vec(&[batch.b, batch.n], hard)?;
        let mean_sparsity = hard.data().iter().sum::<f64>() / hard.len() as f64;
        let node = t.straight_through(hard.clone(), spread)?;
        Ok(MaskSample {
            hard,
            node,
            mean_sparsity,
            starts: Some(starts),
        })
    }

    fn soft_mask(
        &mut self,
        batch: &Batch,
        scores: NodeId,
        rng: &mut ChaCha8Rng,
    ) -> Result<MaskSample, GameError> {
        let t = &mut self.tape;
        let probs = t.sigmoid(scores);
        let pv = t.value(probs).data().to_vec();
        let hard_data: Vec<f64> = pv
            .iter()
            .map(|p| f64::from(rng.random::<f64>() < *p))
            .collect();
        let hard = Array::from_vec(&[batch.b, batch.n], hard_data)?;
        let mean_sparsity = hard.data().iter().sum::<f64>() / hard.len() as f64;
        let node = t.straight_through(hard.clone(), probs)?;
        Ok(MaskSample {
            hard,
            node,
            mean_sparsity,
            starts: None,
        })
    }

    fn predictor_logits(
        &mut self,
        batch: &Batch,
        mask: NodeId,
        env_aware: bool,
    ) -> Result<NodeId, GameError> {
        let (store, ids) = if env_aware {
            (&self.model.f_e, &self.fe_ids)
        } else {
            (&self.model.f_i, &self.fi_ids)
        };
        let embed = ids[store.index_of("embed").unwrap()];
        let w1 = ids[store.index_of("w1").unwrap()];
        let b1 = ids[store.index_of("b1").unwrap()];
        let w2 = ids[store.index_of("w2").unwrap()];
        let b2 = ids[store.index_of("b2").unwrap()];

        let t = &mut self.tape;
        let emb = t.embed(embed, &batch.tokens, &[batch.b, batch.n])?;
        // Fixed-length scaling: each selected token contributes
        // independently of how many others are selected, which keeps a
        // mask bit's effect on the predictors stable as the mask moves.
        let pooled = t.sum_pool_scaled(emb, mask)?;
        let features = if env_aware {
            let n_envs = self.model.n_envs;
            let mut onehot = vec![0.0; batch.b * n_envs];
            for (bi, env) in batch.envs.iter().enumerate() {
                let Some(e) = env else {
                    return Err(GameError::MissingEnv);
                };
                onehot[bi * n_envs + *e as usize] = 1.0;
            }
            let oh = t.leaf(Array::from_vec(&[batch.b, n_envs], onehot)?);
            t.concat_last(pooled, oh)?
        } else {
            pooled
        };
        let pre = t.affine(w1, b1, features)?;
        let hidden = t.tanh(pre);
        Ok(t.affine(w2, b2, hidden)?)
    }

    /// Mean cross-entropy of the environment-agnostic predictor on the
    /// masked batch; scalar node.
    pub fn fi_loss(&mut self, batch: &Batch, mask: NodeId) -> Result<NodeId, GameError> {
        let logits = self.predictor_logits(batch, mask, false)?;
        let ce = self.tape.softmax_cross_entropy(logits, &batch.labels)?;
        Ok(self.tape.mean_all(ce))
    }

    /// Mean cross-entropy of the environment-aware predictor; scalar
    /// node. Requires an environment id on every row.
    pub fn fe_loss(&mut self, batch: &Batch, mask: NodeId) -> Result<NodeId, GameError> {
        let logits = self.predictor_logits(batch, mask, true)?;
        let ce = self.tape.softmax_cross_entropy(logits, &batch.labels)?;
        Ok(self.tape.mean_all(ce))
    }

    /// Environment-agnostic class probabilities `[B, 2]` for inference.
    pub fn fi_probs(&mut self, batch: &Batch, mask: NodeId) -> Result<NodeId, GameError> {
        let logits = self.predictor_logits(batch, mask, false)?;
        Ok(self.tape.softmax(logits)?)
    }

    /// The generator objective: `L_i + lambda * h(L_i - L_e)` plus, in
    /// soft mode, the sparsity and continuity penalties. When `lambda`
    /// is zero the gap term is not built at all, so the update direction
    /// is bit-identical to the two-player baseline sharing this code.
    pub fn generator_objective(
        &mut self,
        li: NodeId,
        le: Option<NodeId>,
        mask: NodeId,
        config: &GameConfig,
    ) -> Result<NodeId, GameError> {
        let t = &mut self.tape;
        let mut obj = li;
        if config.lambda_inv > 0.0 {
            let le = le.ok_or(GameError::MissingEnv)?;
            let gap = t.sub(li, le)?;
            let h = match config.h_kind {
                HKind::Identity => gap,
                HKind::Relu => t.relu(gap),
            };
            let weighted = t.scale(h, config.lambda_inv);
            obj = t.add(obj, weighted)?;
        }
        if config.constraint_mode == ConstraintMode::Soft {
            if config.mu1 > 0.0 {
                let mean_m = t.mean_all(mask);
                let centered = t.add_scalar(mean_m, -config.alpha_sparsity);
                let dev = t.abs(centered);
                let weighted = t.scale(dev, config.mu1);
                obj = t.add(obj, weighted)?;
            }
            if config.mu2 > 0.0 {
                let tv = t.total_variation_seq(mask)?;
                let mean_tv = t.mean_all(tv);
                let weighted = t.scale(mean_tv, config.mu2);
                obj = t.add(obj, weighted)?;
            }
        }
        Ok(obj)
    }

    /// Gradients of one player's parameters, in store order.
    pub fn grads_for(&self, player: Player) -> Vec<Array> {
        let ids = match player {
            Player::Generator => &self.gen_ids,
            Player::EnvAgnostic => &self.fi_ids,
            Player::EnvAware => &self.fe_ids,
        };
        ids.iter().map(|id| self.tape.grad(*id).clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Player {
    Generator,
    EnvAgnostic,
    EnvAware,
}

/// Value-level generator objective, mirroring
/// [`ForwardPass::generator_objective`] on plain numbers: `mean_mask`
/// and `mean_tv` are the batch-mean selection rate and total variation
/// of the mask (ignored in hard mode).
pub fn generator_objective_value(
    l_i: f64,
    l_e: f64,
    mean_mask: f64,
    mean_tv: f64,
    config: &GameConfig,
) -> f64 {
    let mut obj = l_i + config.lambda_inv * config.h_kind.apply(l_i - l_e);
    if config.constraint_mode == ConstraintMode::Soft {
        obj += config.mu1 * (mean_mask - config.alpha_sparsity).abs();
        obj += config.mu2 * mean_tv;
    }
    obj
}

/// Evaluates both predictor losses on a fixed binary mask (no gradient
/// bookkeeping leaks out; the mask is treated as a constant).
pub fn predictor_losses(
    model: &GameModel,
    batch: &Batch,
    mask: &Array,
) -> Result<(f64, f64), GameError> {
    let mut fp = ForwardPass::new(model);
    let mask_node = fp.tape.leaf(mask.clone());
    let li = fp.fi_loss(batch, mask_node)?;
    let le = fp.fe_loss(batch, mask_node)?;
    Ok((fp.tape.value(li).item(), fp.tape.value(le).item()))
}
