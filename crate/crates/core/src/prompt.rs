//! Prompt pool of fixed focus/background blends and the learnable selector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{gaussian, Ctx, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

/// Focus weights `i / (η - 1)`; a single entry gets 0.5.
pub fn pool_weights(eta: usize) -> Result<Vec<f64>> {
    match eta {
        0 => Err(Error::Invalid("prompt pool needs at least one entry".into())),
        1 => Ok(vec![0.5]),
        _ => Ok((0..eta).map(|i| i as f64 / (eta - 1) as f64).collect()),
    }
}

/// η entries sharing one `(h_f, h_b, h_cls)` triple. Entry `i` blends
/// `T_f = [h_f; h_cls]` and `T_b = [h_b; h_cls]` with weights `(w_f[i], 1 - w_f[i])`.
#[derive(Clone, Debug)]
pub struct PromptPool {
    pub h_f: Var,
    pub h_b: Var,
    pub h_cls: Var,
    pub w_f: Vec<f64>,
}

impl PromptPool {
    pub fn len(&self) -> usize {
        self.w_f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_f.is_empty()
    }

    pub fn w_b(&self) -> Vec<f64> {
        self.w_f.iter().map(|w| 1.0 - w).collect()
    }
}

pub fn build_pool(h_f: Var, h_b: Var, h_cls: Var, eta: usize) -> Result<PromptPool> {
    Ok(PromptPool { h_f, h_b, h_cls, w_f: pool_weights(eta)? })
}

/// Pool with explicit focus weights (used for fixed-weight variants).
pub fn pool_with_weights(h_f: Var, h_b: Var, h_cls: Var, w_f: Vec<f64>) -> Result<PromptPool> {
    if w_f.is_empty() || w_f.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::Invalid(format!("fusion weights {w_f:?} must be non-empty and in [0, 1]")));
    }
    Ok(PromptPool { h_f, h_b, h_cls, w_f })
}

/// Fused entries as an `[η, 2d]` matrix; row `i` is `[w h_f + (1-w) h_b, h_cls]`.
///
/// The `h_cls` half is a copy, so it is bit-identical to the input.
pub fn fuse_pool(tape: &mut Tape, pool: &PromptPool) -> Result<Var> {
    let eta = pool.len();
    let d = tape.shape(pool.h_f).1;
    if tape.shape(pool.h_b) != (1, d) || tape.shape(pool.h_cls) != (1, d) {
        return Err(shape_err("fuse_pool", "h_f, h_b and h_cls must be [1, d] rows of one width"));
    }
    let mut w = Vec::with_capacity(2 * eta);
    for &wf in &pool.w_f {
        w.push(wf);
        w.push(1.0 - wf);
    }
    let w = tape.constant(Tensor::matrix(eta, 2, w)?);
    let fb = tape.concat_rows(&[pool.h_f, pool.h_b])?;
    let blend = tape.matmul(w, fb)?;
    let cls = tape.gather_rows(pool.h_cls, &vec![0; eta])?;
    tape.concat_cols(&[blend, cls])
}

/// A fused entry `[1, 2d]` as the 2-step sequence `[2, d]`.
pub fn as_sequence(tape: &mut Tape, entry: Var) -> Result<Var> {
    let (_, w) = tape.shape(entry);
    tape.reshape(entry, 2, w / 2)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectMode {
    /// Softmax-weighted mixture of entries.
    #[default]
    Train,
    /// Hard argmax entry.
    Infer,
    /// Hard entry forward, softmax gradient backward.
    StraightThrough,
}

/// Two-layer scorer over flattened fused entries.
#[derive(Clone, Debug)]
pub struct PromptSelector {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub tau: f64,
}

impl PromptSelector {
    pub fn init(store: &mut ParamStore, dim: usize, hidden: usize, tau: f64, rng: &mut impl Rng) -> Self {
        let w1 = store.add("sel.w1", ParamGroup::Rec, gaussian(rng, hidden, 2 * dim, 1.0 / ((2 * dim) as f64).sqrt()));
        let b1 = store.add("sel.b1", ParamGroup::Rec, Tensor::zeros(1, hidden));
        let w2 = store.add("sel.w2", ParamGroup::Rec, gaussian(rng, 1, hidden, 1.0 / (hidden as f64).sqrt()));
        Self { w1, b1, w2, tau }
    }
}

pub struct Selection {
    /// Argmax entry, in every mode.
    pub index: usize,
    /// `[1, 2d]` selected (or blended) entry.
    pub t_select: Var,
    /// `[1, η]` scores.
    pub scores: Var,
    /// Selection weights: softmax in train mode, one-hot otherwise.
    pub weights: Vec<f64>,
}

/// `[1, η]` selector scores for the fused entries.
pub fn scores(ctx: &mut Ctx, sel: &PromptSelector, t_c: Var) -> Result<Var> {
    let w1 = ctx.param(sel.w1);
    let b1 = ctx.param(sel.b1);
    let w2 = ctx.param(sel.w2);
    let h = ctx.tape.matmul_bt(t_c, w1)?;
    let h = ctx.tape.add_row(h, b1)?;
    let h = ctx.tape.tanh(h);
    ctx.tape.matmul_bt(w2, h)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn select(ctx: &mut Ctx, sel: &PromptSelector, t_c: Var, mode: SelectMode) -> Result<Selection> {
    let s = scores(ctx, sel, t_c)?;
    let eta = ctx.tape.shape(t_c).0;
    let index = argmax(ctx.tape.value(s).data());
    let one_hot: Vec<f64> = (0..eta).map(|i| if i == index { 1.0 } else { 0.0 }).collect();
    let hard = || -> Vec<f64> { one_hot.clone() };
    match mode {
        SelectMode::Infer => {
            let t_select = ctx.tape.gather_rows(t_c, &[index])?;
            Ok(Selection { index, t_select, scores: s, weights: hard() })
        }
        SelectMode::Train | SelectMode::StraightThrough => {
            let z = ctx.tape.scale(s, 1.0 / sel.tau);
            let p = ctx.tape.softmax_rows(z);
            let soft = ctx.tape.matmul(p, t_c)?;
            if mode == SelectMode::Train {
                let weights = ctx.tape.value(p).data().to_vec();
                return Ok(Selection { index, t_select: soft, scores: s, weights });
            }
            let hard_row = ctx.tape.gather_rows(t_c, &[index])?;
            let hard_row = ctx.tape.detach(hard_row);
            let frozen = ctx.tape.detach(soft);
            let delta = ctx.tape.sub(soft, frozen)?;
            let t_select = ctx.tape.add(hard_row, delta)?;
            Ok(Selection { index, t_select, scores: s, weights: hard() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{AdamW, SeedStreams};
    use proptest::prelude::*;

    fn rows(t: &mut Tape, seed: u64, d: usize) -> (Var, Var, Var) {
        let mut rng = SeedStreams::new(seed).stream("v");
        let f = t.constant(gaussian(&mut rng, 1, d, 1.0));
        let b = t.constant(gaussian(&mut rng, 1, d, 1.0));
        let c = t.constant(gaussian(&mut rng, 1, d, 1.0));
        (f, b, c)
    }

    #[test]
    fn weight_schedules() {
        assert_eq!(pool_weights(5).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(pool_weights(1).unwrap(), vec![0.5]);
        assert_eq!(pool_weights(2).unwrap(), vec![0.0, 1.0]);
        assert!(pool_weights(0).is_err());
        for eta in 1..30 {
            let w = pool_weights(eta).unwrap();
            assert_eq!(w.len(), eta);
            assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn fused_rows_match_loop_and_keep_cls() {
        let mut t = Tape::new();
        let (f, b, c) = rows(&mut t, 1, 4);
        let pool = build_pool(f, b, c, 5).unwrap();
        let tc = fuse_pool(&mut t, &pool).unwrap();
        let (fv, bv, cv) = (t.value(f).clone(), t.value(b).clone(), t.value(c).clone());
        let out = t.value(tc);
        assert_eq!(out.shape(), &[5, 8]);
        for (i, w) in pool.w_f.iter().enumerate() {
            for j in 0..4 {
                let want = w * fv.data()[j] + (1.0 - w) * bv.data()[j];
                assert!((out.get(i, j) - want).abs() < 1e-15);
                assert_eq!(out.get(i, 4 + j).to_bits(), cv.data()[j].to_bits());
            }
        }
        assert_eq!(&out.row_slice(4)[..4], fv.data());
    }

    #[test]
    fn equal_halves_are_degenerate() {
        let mut t = Tape::new();
        let (f, _, c) = rows(&mut t, 2, 3);
        let pool = build_pool(f, f, c, 1).unwrap();
        let tc = fuse_pool(&mut t, &pool).unwrap();
        let fv = t.value(f).data().to_vec();
        for (a, b) in t.value(tc).row_slice(0)[..3].iter().zip(&fv) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn selector(seed: u64, d: usize, tau: f64) -> (ParamStore, PromptSelector) {
        let mut store = ParamStore::new();
        let sel = PromptSelector::init(&mut store, d, 6, tau, &mut SeedStreams::new(seed).stream("sel"));
        (store, sel)
    }

    #[test]
    fn single_entry_selection() {
        let (store, sel) = selector(1, 3, 1.0);
        for mode in [SelectMode::Train, SelectMode::Infer, SelectMode::StraightThrough] {
            let mut ctx = Ctx::new(&store, false);
            let (f, b, c) = rows(&mut ctx.tape, 3, 3);
            let pool = build_pool(f, b, c, 1).unwrap();
            let tc = fuse_pool(&mut ctx.tape, &pool).unwrap();
            let s = select(&mut ctx, &sel, tc, mode).unwrap();
            assert_eq!(s.index, 0);
            assert_eq!(ctx.tape.value(s.t_select).data(), ctx.tape.value(tc).data());
        }
    }

    #[test]
    fn weights_are_distributions() {
        let (store, sel) = selector(2, 4, 1.0);
        let mut ctx = Ctx::new(&store, false);
        let (f, b, c) = rows(&mut ctx.tape, 4, 4);
        let pool = build_pool(f, b, c, 7).unwrap();
        let tc = fuse_pool(&mut ctx.tape, &pool).unwrap();
        let train = select(&mut ctx, &sel, tc, SelectMode::Train).unwrap();
        assert!((train.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(train.weights.iter().all(|&w| w >= 0.0));
        let infer = select(&mut ctx, &sel, tc, SelectMode::Infer).unwrap();
        assert_eq!(infer.weights.iter().filter(|&&w| w == 1.0).count(), 1);
        assert_eq!(infer.weights.iter().sum::<f64>(), 1.0);
        assert_eq!(train.index, infer.index);
        let st = select(&mut ctx, &sel, tc, SelectMode::StraightThrough).unwrap();
        assert_eq!(ctx.tape.value(st.t_select), ctx.tape.value(infer.t_select));
    }

    #[test]
    fn annealed_softmax_approaches_hard_choice() {
        let (mut store, sel) = selector(3, 4, 1e-3);
        // scale the output layer so the scores are well separated
        let w2 = store.value(sel.w2).map(|x| x * 50.0);
        store.set(sel.w2, w2).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let (f, b, c) = rows(&mut ctx.tape, 5, 4);
        let pool = build_pool(f, b, c, 5).unwrap();
        let tc = fuse_pool(&mut ctx.tape, &pool).unwrap();
        let soft = select(&mut ctx, &sel, tc, SelectMode::Train).unwrap();
        let hard = select(&mut ctx, &sel, tc, SelectMode::Infer).unwrap();
        let sc = ctx.tape.value(soft.scores).data().to_vec();
        let mut sorted = sc.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sorted[0] - sorted[1] > 0.05, "scores not separated: {sc:?}");
        let dev = ctx
            .tape
            .value(soft.t_select)
            .data()
            .iter()
            .zip(ctx.tape.value(hard.t_select).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-4);
    }

    #[test]
    fn selector_learns_to_pick_pure_focus() {
        let (mut store, sel) = selector(4, 4, 1.0);
        let mut opt = AdamW::new(0.01, 0.0);
        let ids = store.group_ids(ParamGroup::Rec);
        let data = {
            let mut t = Tape::new();
            let (f, b, c) = rows(&mut t, 6, 4);
            (t.value(f).clone(), t.value(b).clone(), t.value(c).clone())
        };
        for _ in 0..200 {
            let mut ctx = Ctx::new(&store, true);
            let f = ctx.tape.constant(data.0.clone());
            let b = ctx.tape.constant(data.1.clone());
            let c = ctx.tape.constant(data.2.clone());
            let pool = build_pool(f, b, c, 2).unwrap();
            let tc = fuse_pool(&mut ctx.tape, &pool).unwrap();
            let s = select(&mut ctx, &sel, tc, SelectMode::Train).unwrap();
            let head = ctx.tape.slice_cols(s.t_select, 0, 4).unwrap();
            let diff = ctx.tape.sub(head, f).unwrap();
            let sq = ctx.tape.mul(diff, diff).unwrap();
            let loss = ctx.tape.sum(sq);
            let bp = ctx.finish(loss).unwrap();
            store.zero_grad();
            store.accumulate(&bp.binding, &bp.grads);
            opt.step(&mut store, &ids);
        }
        let mut ctx = Ctx::new(&store, false);
        let f = ctx.tape.constant(data.0.clone());
        let b = ctx.tape.constant(data.1.clone());
        let c = ctx.tape.constant(data.2.clone());
        let pool = build_pool(f, b, c, 2).unwrap();
        let tc = fuse_pool(&mut ctx.tape, &pool).unwrap();
        assert_eq!(select(&mut ctx, &sel, tc, SelectMode::Infer).unwrap().index, 1);
    }

    proptest! {
        #[test]
        fn argmax_invariant_to_scale_and_shift(xs in prop::collection::vec(-10.0f64..10.0, 1..12), c in 0.01f64..100.0, k in -50.0f64..50.0) {
            let i = argmax(&xs);
            let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
            prop_assert_eq!(argmax(&scaled), i);
            let shifted: Vec<f64> = xs.iter().map(|x| x + k).collect();
            // shifting can merge near-equal values through rounding; compare values instead
            prop_assert!((xs[argmax(&shifted)] - xs[i]).abs() < 1e-9);
        }
    }
}
