//! Consistency losses over unit-normalized embeddings, the decay schedule
//! of the ground-truth assisted term, and the total objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Accepted deviation of an embedding norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Weight of the ground-truth assisted inter-modal term at optimizer step
/// `iter`: `max(0.1, 0.9^(iter / 100))`.
pub fn gamma_schedule(iter: u64) -> f64 {
    0.9f64.powf(iter as f64 / 100.0).max(0.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mask: f64,
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_cs: f64,
    pub l_total: f64,
    pub gamma: f64,
    pub lambda: f64,
}

/// `l_cs = l_inter + l_intra`, `l_total = l_mask + lambda * l_cs`.
pub fn total_loss(l_mask: f64, l_inter: f64, l_intra: f64, lambda: f64, gamma: f64) -> LossBreakdown {
    let l_cs = l_inter + l_intra;
    LossBreakdown {
        l_mask,
        l_inter,
        l_intra,
        l_cs,
        l_total: l_mask + lambda * l_cs,
        gamma,
        lambda,
    }
}

/// Per-source embeddings, each `[N, D]` with unit rows.
#[derive(Clone, Copy, Debug)]
pub struct Pair {
    pub p: Var,
    pub q: Var,
}

fn check_unit_rows(tape: &Tape, v: Var, what: &str) -> Result<()> {
    let t = tape.value(v);
    if t.ndim() != 2 {
        return Err(Error::shape("consistency loss", format!("{what}: expected [N, D], got {:?}", t.shape())));
    }
    let d = t.shape()[1];
    for (r, row) in t.data().chunks(d).enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "{what} row {r} has norm {norm}, expected a unit vector"
            )));
        }
    }
    Ok(())
}

/// Audio-visual alignment. Positive pairs are each separated embedding
/// with its own clip's visual embedding; negatives cross the clips. When
/// `ground_truth` is given, its alignment with the visual embeddings is
/// added with weight `gamma`. Averaged over the batch.
pub fn inter_modal_loss(
    tape: &mut Tape,
    pred: Pair,
    ground_truth: Option<Pair>,
    visual: Pair,
    gamma: f64,
) -> Result<Var> {
    for (v, what) in [
        (pred.p, "f_pred_P"),
        (pred.q, "f_pred_Q"),
        (visual.p, "f_v_P"),
        (visual.q, "f_v_Q"),
    ] {
        check_unit_rows(tape, v, what)?;
    }
    let pos_p = tape.row_distance(pred.p, visual.p)?;
    let pos_q = tape.row_distance(pred.q, visual.q)?;
    let neg_p = tape.row_distance(pred.p, visual.q)?;
    let neg_q = tape.row_distance(pred.q, visual.p)?;
    let pos = tape.add(pos_p, pos_q)?;
    let neg = tape.add(neg_p, neg_q)?;
    let mut per_row = tape.sub(pos, neg)?;
    if let Some(gt) = ground_truth {
        check_unit_rows(tape, gt.p, "f_GT_P")?;
        check_unit_rows(tape, gt.q, "f_GT_Q")?;
        let gp = tape.row_distance(gt.p, visual.p)?;
        let gq = tape.row_distance(gt.q, visual.q)?;
        let gsum = tape.add(gp, gq)?;
        let weighted = tape.scale(gsum, gamma);
        per_row = tape.add(weighted, per_row)?;
    }
    Ok(tape.mean(per_row))
}

/// Pulls each separated embedding toward a same-category template and
/// pushes the two separated embeddings apart. Averaged over the batch.
pub fn intra_modal_loss(tape: &mut Tape, pred: Pair, template: Pair) -> Result<Var> {
    for (v, what) in [
        (pred.p, "f_pred_P"),
        (pred.q, "f_pred_Q"),
        (template.p, "f_temp_P"),
        (template.q, "f_temp_Q"),
    ] {
        check_unit_rows(tape, v, what)?;
    }
    let tp = tape.row_distance(pred.p, template.p)?;
    let tq = tape.row_distance(pred.q, template.q)?;
    let apart = tape.row_distance(pred.p, pred.q)?;
    let pull = tape.add(tp, tq)?;
    let per_row = tape.sub(pull, apart)?;
    Ok(tape.mean(per_row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::SQRT_2;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    fn row(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::new([1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_schedule(0), 1.0);
        assert_eq!(gamma_schedule(100), 0.9);
        assert_eq!(gamma_schedule(3000), 0.1);
        assert!(gamma_schedule(50) < 1.0 && gamma_schedule(50) > 0.9);
    }

    #[test]
    fn identical_vectors_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = unit(&mut rng, 256);
        let mut tape = Tape::new();
        let x = row(&mut tape, &u);
        let pair = Pair { p: x, q: x };
        let inter = inter_modal_loss(&mut tape, pair, Some(pair), pair, 0.7).unwrap();
        let intra = intra_modal_loss(&mut tape, pair, pair).unwrap();
        assert_eq!(tape.item(inter).unwrap(), 0.0);
        assert_eq!(tape.item(intra).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_closed_forms() {
        let mut u = vec![0.0; 256];
        let mut v = vec![0.0; 256];
        u[3] = 1.0;
        v[100] = 1.0;
        for gamma in [0.1, 0.5, 1.0] {
            let mut tape = Tape::new();
            let (a, b) = (row(&mut tape, &u), row(&mut tape, &v));
            let pair = Pair { p: a, q: b };
            let inter = inter_modal_loss(&mut tape, pair, Some(pair), pair, gamma).unwrap();
            let intra = intra_modal_loss(&mut tape, pair, pair).unwrap();
            assert!((tape.item(inter).unwrap() + 2.0 * SQRT_2).abs() < 1e-12);
            assert!((tape.item(intra).unwrap() + SQRT_2).abs() < 1e-12);
        }
    }

    #[test]
    fn random_vectors_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let f: Vec<Vec<f64>> = (0..8).map(|_| unit(&mut rng, 32)).collect();
            let gamma = rng.random_range(0.1..1.0);
            let (pp, pq, gp, gq, vp, vq, tp, tq) =
                (&f[0], &f[1], &f[2], &f[3], &f[4], &f[5], &f[6], &f[7]);
            let inter_oracle = gamma * (dist(gp, vp) + dist(gq, vq)) + dist(pp, vp) + dist(pq, vq)
                - dist(pp, vq)
                - dist(pq, vp);
            let intra_oracle = dist(pp, tp) + dist(pq, tq) - dist(pp, pq);

            let mut tape = Tape::new();
            let vars: Vec<Var> = f.iter().map(|x| row(&mut tape, x)).collect();
            let inter = inter_modal_loss(
                &mut tape,
                Pair { p: vars[0], q: vars[1] },
                Some(Pair { p: vars[2], q: vars[3] }),
                Pair { p: vars[4], q: vars[5] },
                gamma,
            )
            .unwrap();
            let intra = intra_modal_loss(
                &mut tape,
                Pair { p: vars[0], q: vars[1] },
                Pair { p: vars[6], q: vars[7] },
            )
            .unwrap();
            assert!((tape.item(inter).unwrap() - inter_oracle).abs() <= 1e-12);
            assert!((tape.item(intra).unwrap() - intra_oracle).abs() <= 1e-12);
            // bounds for unit vectors
            assert!((-4.0..=4.0 + 4.0 * gamma).contains(&inter_oracle));
            assert!((-2.0..=4.0).contains(&intra_oracle));
        }
    }

    #[test]
    fn swapping_sources_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<Vec<f64>> = (0..8).map(|_| unit(&mut rng, 16)).collect();
        let eval = |swap: bool| {
            let mut tape = Tape::new();
            let v: Vec<Var> = f.iter().map(|x| row(&mut tape, x)).collect();
            let pick = |a: usize, b: usize| if swap { Pair { p: v[b], q: v[a] } } else { Pair { p: v[a], q: v[b] } };
            let inter = inter_modal_loss(&mut tape, pick(0, 1), Some(pick(2, 3)), pick(4, 5), 0.4).unwrap();
            let intra = intra_modal_loss(&mut tape, pick(0, 1), pick(6, 7)).unwrap();
            (tape.item(inter).unwrap(), tape.item(intra).unwrap())
        };
        let (a, b) = (eval(false), eval(true));
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn excluded_ground_truth_has_no_influence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 16)).collect();
        let mut tape = Tape::new();
        let v: Vec<Var> = f.iter().map(|x| tape.var(Tensor::new([1, 16], x.clone()).unwrap())).collect();
        let gt: Vec<Var> = (0..2).map(|_| tape.var(Tensor::new([1, 16], unit(&mut rng, 16)).unwrap())).collect();
        let loss = inter_modal_loss(
            &mut tape,
            Pair { p: v[0], q: v[1] },
            None,
            Pair { p: v[2], q: v[3] },
            1.0,
        )
        .unwrap();
        let value = tape.item(loss).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(gt[0]).is_none() && grads.wrt(gt[1]).is_none());
        let oracle = dist(&f[0], &f[2]) + dist(&f[1], &f[3]) - dist(&f[0], &f[3]) - dist(&f[1], &f[2]);
        assert!((value - oracle).abs() < 1e-12);
    }

    #[test]
    fn non_unit_input_is_rejected() {
        let mut tape = Tape::new();
        let a = row(&mut tape, &[1.0, 1.0]);
        let b = row(&mut tape, &[1.0, 0.0]);
        let pair = Pair { p: a, q: b };
        assert!(inter_modal_loss(&mut tape, pair, None, Pair { p: b, q: b }, 1.0).is_err());
        assert!(intra_modal_loss(&mut tape, Pair { p: b, q: b }, pair).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let raw: Vec<Tensor> = (0..8)
                .map(|_| Tensor::new([2, 6], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            let check = gradcheck(&raw, 1e-5, |tape, v| {
                let n: Vec<Var> = v.iter().map(|&x| tape.l2_normalize(x)).collect::<Result<_>>()?;
                let inter = inter_modal_loss(
                    tape,
                    Pair { p: n[0], q: n[1] },
                    Some(Pair { p: n[2], q: n[3] }),
                    Pair { p: n[4], q: n[5] },
                    0.3,
                )?;
                let intra = intra_modal_loss(tape, Pair { p: n[0], q: n[1] }, Pair { p: n[6], q: n[7] })?;
                tape.add(inter, intra)
            })
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "{}", check.max_rel_error);
        }
    }

    #[test]
    fn breakdown_arithmetic() {
        let b = total_loss(0.7, 0.0, 0.0, 0.01, 1.0);
        assert_eq!(b.l_total, 0.7);
        let b = total_loss(0.0, 1.0, 2.0, 0.01, 1.0);
        assert_eq!(b.l_cs, 3.0);
        assert!((b.l_total - 0.03).abs() < 1e-15);
        let b = total_loss(0.4, 0.5, -0.25, 0.0, 0.5);
        assert_eq!(b.l_total.to_bits(), 0.4f64.to_bits());
    }
}
