//! Focus/background split of the dialogue summary and the two
//! self-supervised losses that shape it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numcore::{cosine_sim, gaussian, Ctx, ParamGroup, ParamId, ParamStore, Tape, Var};

pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Disentangler {
    pub p_f: ParamId,
    pub p_b: ParamId,
    pub margin: f64,
}

impl Disentangler {
    pub fn init(store: &mut ParamStore, dim: usize, margin: f64, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let p_f = store.add("dis.p_f", ParamGroup::Rec, gaussian(rng, dim, dim, std));
        let p_b = store.add("dis.p_b", ParamGroup::Rec, gaussian(rng, dim, dim, std));
        Self { p_f, p_b, margin }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DominanceLabel {
    Focus,
    Background,
}

/// Similarity used inside the counterfactual ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityMode {
    /// `(1 + cos) / 2`, bounded in `[0, 1]`.
    #[default]
    Shifted,
    /// Plain cosine; the ratio may leave `[-1, 0]` or blow up.
    Raw,
}

/// `h_f = P_f h_cls`, `h_b = P_b h_cls` on `[1, d]` rows.
pub fn split(ctx: &mut Ctx, dis: &Disentangler, h_cls: Var) -> Result<(Var, Var)> {
    let p_f = ctx.param(dis.p_f);
    let p_b = ctx.param(dis.p_b);
    let h_f = ctx.tape.matmul_bt(h_cls, p_f)?;
    let h_b = ctx.tape.matmul_bt(h_cls, p_b)?;
    Ok((h_f, h_b))
}

/// Two-hinge margin loss pulling `h_f` toward the proxy and pushing `h_b` away.
pub fn contrastive_loss(tape: &mut Tape, h_f: Var, h_b: Var, h_p: Var, margin: f64) -> Result<Var> {
    let s_fb = tape.cosine(h_f, h_b)?;
    let s_fp = tape.cosine(h_f, h_p)?;
    let s_bp = tape.cosine(h_b, h_p)?;
    let a = tape.sub(s_fb, s_fp)?;
    let a = tape.add_const(a, margin);
    let a = tape.relu(a);
    let b = tape.sub(s_bp, s_fp)?;
    let b = tape.add_const(b, margin);
    let b = tape.relu(b);
    tape.add(a, b)
}

fn sim_value(x: &[f64], y: &[f64], mode: SimilarityMode) -> Result<f64> {
    let c = cosine_sim(x, y)?;
    Ok(match mode {
        SimilarityMode::Shifted => 0.5 * (1.0 + c),
        SimilarityMode::Raw => c,
    })
}

/// Which factor explains the target better; ties go to focus.
pub fn dominance(h_f: &[f64], h_b: &[f64], h_t: &[f64], mode: SimilarityMode) -> Result<DominanceLabel> {
    let s_f = sim_value(h_f, h_t, mode)?;
    let s_b = sim_value(h_b, h_t, mode)?;
    Ok(if s_f >= s_b { DominanceLabel::Focus } else { DominanceLabel::Background })
}

fn sim_var(tape: &mut Tape, x: Var, y: Var, mode: SimilarityMode) -> Result<Var> {
    let c = tape.cosine(x, y)?;
    Ok(match mode {
        SimilarityMode::Shifted => {
            let h = tape.scale(c, 0.5);
            tape.add_const(h, 0.5)
        }
        SimilarityMode::Raw => c,
    })
}

/// Negative share of the dominant factor's similarity to the target.
///
/// The label is taken from `label` when given (frozen labels), otherwise
/// recomputed from the current values. Returns the loss and the label used.
pub fn counterfactual_loss(
    tape: &mut Tape,
    h_f: Var,
    h_b: Var,
    h_t: Var,
    label: Option<DominanceLabel>,
    mode: SimilarityMode,
) -> Result<(Var, DominanceLabel)> {
    let s_f = sim_var(tape, h_f, h_t, mode)?;
    let s_b = sim_var(tape, h_b, h_t, mode)?;
    let (vf, vb) = (tape.scalar(s_f), tape.scalar(s_b));
    tape.note_kink((vf - vb).abs());
    let label = label.unwrap_or(if vf >= vb { DominanceLabel::Focus } else { DominanceLabel::Background });
    let num = match label {
        DominanceLabel::Focus => s_f,
        DominanceLabel::Background => s_b,
    };
    let den = tape.add(s_f, s_b)?;
    let den = tape.add_const(den, EPS);
    let ratio = tape.div(num, den)?;
    Ok((tape.scale(ratio, -1.0), label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, SeedStreams, Tensor};
    use proptest::prelude::*;

    fn row(t: &mut Tape, v: &[f64]) -> Var {
        t.constant(Tensor::row(v.to_vec()))
    }

    #[test]
    fn split_examples() {
        let mut store = ParamStore::new();
        let dis = Disentangler::init(&mut store, 3, 0.2, &mut SeedStreams::new(1).stream("d"));
        let mut ctx = Ctx::new(&store, false);
        let h = ctx.tape.constant(Tensor::row(vec![0.0; 3]));
        let (f, b) = split(&mut ctx, &dis, h).unwrap();
        assert_eq!(ctx.tape.value(f).data(), &[0.0; 3]);
        assert_eq!(ctx.tape.value(b).data(), &[0.0; 3]);

        store.set(dis.p_f, Tensor::identity(3)).unwrap();
        store.set(dis.p_b, Tensor::zeros(3, 3)).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let h = ctx.tape.constant(Tensor::row(vec![0.5, -1.0, 2.0]));
        let (f, b) = split(&mut ctx, &dis, h).unwrap();
        assert_eq!(ctx.tape.value(f).data(), &[0.5, -1.0, 2.0]);
        assert_eq!(ctx.tape.value(b).data(), &[0.0; 3]);
    }

    #[test]
    fn split_matches_explicit_loop() {
        let mut store = ParamStore::new();
        let dis = Disentangler::init(&mut store, 4, 0.2, &mut SeedStreams::new(2).stream("d"));
        let h = [0.3, -0.7, 1.1, 0.2];
        let mut ctx = Ctx::new(&store, false);
        let hv = ctx.tape.constant(Tensor::row(h.to_vec()));
        let (f, _) = split(&mut ctx, &dis, hv).unwrap();
        let p = store.value(dis.p_f);
        for i in 0..4 {
            let s: f64 = h.iter().enumerate().map(|(j, x)| p.get(i, j) * x).sum();
            assert!((ctx.tape.value(f).data()[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_examples() {
        let mut t = Tape::new();
        let f = row(&mut t, &[1.0, 0.0, 0.0]);
        let b = row(&mut t, &[0.0, 1.0, 0.0]);
        let p = row(&mut t, &[2.0, 0.0, 0.0]);
        let l = contrastive_loss(&mut t, f, b, p, 0.2).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let l = contrastive_loss(&mut t, f, f, f, 0.2).unwrap();
        assert!((t.scalar(l) - 0.4).abs() < 1e-12);
        let z = row(&mut t, &[0.0, 0.0, 0.0]);
        assert!(contrastive_loss(&mut t, f, z, p, 0.2).is_err());
    }

    #[test]
    fn dominance_examples() {
        let t = [1.0, 0.0];
        let perp = [0.0, 1.0];
        let m = SimilarityMode::Shifted;
        assert_eq!(dominance(&t, &perp, &t, m).unwrap(), DominanceLabel::Focus);
        assert_eq!(dominance(&perp, &t, &t, m).unwrap(), DominanceLabel::Background);
        assert_eq!(dominance(&perp, &perp, &t, m).unwrap(), DominanceLabel::Focus);
    }

    #[test]
    fn counterfactual_examples() {
        let mut t = Tape::new();
        let ht = row(&mut t, &[1.0, 0.0]);
        let f = row(&mut t, &[0.8, 0.6]);
        let b = row(&mut t, &[-0.8, 0.6]);
        let (l, lab) = counterfactual_loss(&mut t, f, b, ht, None, SimilarityMode::Shifted).unwrap();
        assert_eq!(lab, DominanceLabel::Focus);
        assert!((t.scalar(l) + 0.9).abs() < 1e-6);

        let (l, _) = counterfactual_loss(&mut t, f, f, ht, None, SimilarityMode::Shifted).unwrap();
        assert!((t.scalar(l) + 0.5).abs() < 1e-7);

        let neg = row(&mut t, &[-1.0, 0.0]);
        let (l, lab) = counterfactual_loss(&mut t, ht, neg, ht, None, SimilarityMode::Shifted).unwrap();
        assert_eq!(lab, DominanceLabel::Focus);
        assert!((t.scalar(l) + 1.0).abs() < 1e-6);

        let (l, lab) = counterfactual_loss(&mut t, f, b, ht, Some(DominanceLabel::Background), SimilarityMode::Shifted).unwrap();
        assert_eq!(lab, DominanceLabel::Background);
        assert!((t.scalar(l) + 0.1).abs() < 1e-6);
    }

    #[test]
    fn label_carries_no_gradient() {
        // frozen label and recomputed label give the same gradient away from ties
        let mut t = Tape::new();
        let ht = row(&mut t, &[1.0, 0.2, -0.3]);
        let f = t.param(Tensor::row(vec![0.9, 0.1, 0.0]));
        let b = t.param(Tensor::row(vec![-0.2, 1.0, 0.4]));
        let (l1, lab) = counterfactual_loss(&mut t, f, b, ht, None, SimilarityMode::Shifted).unwrap();
        let (l2, _) = counterfactual_loss(&mut t, f, b, ht, Some(lab), SimilarityMode::Shifted).unwrap();
        let g1 = t.backward(l1).unwrap().get(f);
        let g2 = t.backward(l2).unwrap().get(f);
        assert_eq!(g1, g2);
    }

    fn cd_at(t: &mut Tape, x: Var) -> Result<Var> {
        let f = t.slice_cols(x, 0, 4)?;
        let b = t.slice_cols(x, 4, 4)?;
        let p = t.slice_cols(x, 8, 4)?;
        contrastive_loss(t, f, b, p, 0.2)
    }

    #[test]
    fn gradients_pass_grad_check() {
        let mut rng = SeedStreams::new(3).stream("gc");
        let mut checked = 0;
        while checked < 20 {
            let point = gaussian(&mut rng, 1, 12, 1.0);
            let r = grad_check(cd_at, &point, 1e-5).unwrap();
            if r.kink_distance < 1e-4 {
                continue;
            }
            assert!(r.max_rel_error < 1e-4, "cd {r:?}");
            let ci = |t: &mut Tape, x: Var| -> Result<Var> {
                let f = t.slice_cols(x, 0, 4)?;
                let b = t.slice_cols(x, 4, 4)?;
                let h = t.slice_cols(x, 8, 4)?;
                Ok(counterfactual_loss(t, f, b, h, None, SimilarityMode::Shifted)?.0)
            };
            let r = grad_check(ci, &point, 1e-5).unwrap();
            if r.kink_distance >= 1e-4 {
                assert!(r.max_rel_error < 1e-4, "ci {r:?}");
            }
            checked += 1;
        }
    }

    #[test]
    fn descent_on_contrastive_loss_separates() {
        let mut rng = SeedStreams::new(4).stream("opt");
        let mut trials = 0;
        for _ in 0..50 {
            let f0 = gaussian(&mut rng, 1, 6, 1.0);
            let b0 = gaussian(&mut rng, 1, 6, 1.0);
            let p = gaussian(&mut rng, 1, 6, 1.0);
            let gap = |f: &Tensor, b: &Tensor| {
                let fp = cosine_sim(f.data(), p.data()).unwrap();
                let fb = cosine_sim(f.data(), b.data()).unwrap();
                let bp = cosine_sim(b.data(), p.data()).unwrap();
                fp - fb.max(bp)
            };
            let mut t = Tape::new();
            let (fv, bv, pv) = (t.constant(f0.clone()), t.constant(b0.clone()), t.constant(p.clone()));
            let l0 = contrastive_loss(&mut t, fv, bv, pv, 0.2).unwrap();
            if t.scalar(l0) <= 0.0 {
                continue;
            }
            trials += 1;
            let (mut f, mut b) = (f0.clone(), b0.clone());
            for _ in 0..100 {
                let mut t = Tape::new();
                let (fv, bv, pv) = (t.param(f.clone()), t.param(b.clone()), t.constant(p.clone()));
                let l = contrastive_loss(&mut t, fv, bv, pv, 0.2).unwrap();
                let g = t.backward(l).unwrap();
                let (gf, gb) = (g.get(fv), g.get(bv));
                for (x, d) in f.data_mut().iter_mut().zip(gf.data()) {
                    *x -= 0.1 * d;
                }
                for (x, d) in b.data_mut().iter_mut().zip(gb.data()) {
                    *x -= 0.1 * d;
                }
            }
            assert!(gap(&f, &b) > gap(&f0, &b0));
        }
        assert!(trials > 10);
    }

    proptest! {
        #[test]
        fn loss_bounds(v in prop::collection::vec(-5.0f64..5.0, 9), m in 0.0f64..1.0) {
            prop_assume!(v[0..3].iter().any(|x| x.abs() > 1e-3));
            prop_assume!(v[3..6].iter().any(|x| x.abs() > 1e-3));
            prop_assume!(v[6..9].iter().any(|x| x.abs() > 1e-3));
            let mut t = Tape::new();
            let f = row(&mut t, &v[0..3]);
            let b = row(&mut t, &v[3..6]);
            let p = row(&mut t, &v[6..9]);
            let cd = contrastive_loss(&mut t, f, b, p, m).unwrap();
            prop_assert!(t.scalar(cd) >= 0.0 && t.scalar(cd) <= 2.0 * (2.0 + m));
            let (ci, _) = counterfactual_loss(&mut t, f, b, p, None, SimilarityMode::Shifted).unwrap();
            prop_assert!(t.scalar(ci) >= -1.0 && t.scalar(ci) <= 0.0);
        }

        #[test]
        fn dominance_scale_invariant(v in prop::collection::vec(-5.0f64..5.0, 6), s in prop::collection::vec(0.01f64..100.0, 3)) {
            let (f, b, h) = (&v[0..2], &v[2..4], &v[4..6]);
            prop_assume!(f.iter().chain(b).chain(h).all(|x| x.abs() > 1e-3));
            let sc = |x: &[f64], k: f64| x.iter().map(|y| y * k).collect::<Vec<_>>();
            let m = SimilarityMode::Shifted;
            let s_f = cosine_sim(f, h).unwrap();
            let s_b = cosine_sim(b, h).unwrap();
            prop_assume!((s_f - s_b).abs() > 1e-9);
            prop_assert_eq!(
                dominance(f, b, h, m).unwrap(),
                dominance(&sc(f, s[0]), &sc(b, s[1]), &sc(h, s[2]), m).unwrap()
            );
        }
    }
}
