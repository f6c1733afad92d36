//! Reverse-mode rules against central differences, 20 random instances per
//! primitive.

use proptest::prelude::*;
use proptest::test_runner::Config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seco::autodiff::{gradcheck, Conv2dOpts, Tape, Tensor, Var};
use seco::losses::{inter_modal_loss, intra_modal_loss, Pair};
use seco::Result;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for kinked primitives.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values (no ties), for max-type primitives.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), idx.iter().map(|&k| k as f64 * 0.1 - 1.0).collect()).unwrap()
}

/// Reduces any output to a scalar through a fixed random projection, so
/// every output element's gradient is exercised.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let shape = tape.shape(v).to_vec();
    let r = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let m = tape.mul(v, r)?;
    Ok(tape.sum(m))
}

fn check<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let g = gradcheck(inputs, H, f).unwrap();
    assert!(g.max_rel_error < TOL, "relative error {}", g.max_rel_error);
}

fn cfg() -> Config {
    Config::with_cases(20)
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn elementwise_binary(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        check(&[a.clone(), b.clone()], |t, v| { let y = t.add(v[0], v[1])?; project(t, y, seed) });
        check(&[a.clone(), b.clone()], |t, v| { let y = t.sub(v[0], v[1])?; project(t, y, seed) });
        check(&[a, b], |t, v| { let y = t.mul(v[0], v[1])?; project(t, y, seed) });
    }

    #[test]
    fn scale_sum_mean(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[2, 3, 2], -2.0, 2.0);
        let s = rng.random_range(-3.0..3.0);
        check(&[a.clone()], |t, v| { let y = t.scale(v[0], s); project(t, y, seed) });
        check(&[a.clone()], |t, v| { let y = t.mul(v[0], v[0])?; Ok(t.sum(y)) });
        check(&[a], |t, v| { let y = t.mul(v[0], v[0])?; Ok(t.mean(y)) });
    }

    #[test]
    fn broadcast_reshape_sum_axis(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[1, 3, 1], -2.0, 2.0);
        check(&[a.clone()], |t, v| { let y = t.broadcast_to(v[0], &[2, 3, 4])?; project(t, y, seed) });
        check(&[a], |t, v| { let y = t.reshape(v[0], &[3])?; project(t, y, seed) });
        let b = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
        for axis in 0..3 {
            check(&[b.clone()], |t, v| { let y = t.sum_axis(v[0], axis)?; project(t, y, seed) });
        }
    }

    #[test]
    fn matmul(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[5, 2], -1.0, 1.0);
        check(&[a, b], |t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, seed) });
    }

    #[test]
    fn conv2d(seed in any::<u64>(), stride in 1usize..3, pad in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        check(&[x, w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), Conv2dOpts::new(stride, pad))?;
            project(t, y, seed)
        });
    }

    #[test]
    fn conv_transpose2d(seed in any::<u64>(), stride in 1usize..3, pad in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
        check(&[x, w, b], |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), Conv2dOpts::new(stride, pad))?;
            project(t, y, seed)
        });
    }

    #[test]
    fn conv1d(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 9], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        check(&[x, w, b], |t, v| { let y = t.conv1d(v[0], v[1], Some(v[2]), 2, 1)?; project(t, y, seed) });
    }

    #[test]
    fn pointwise_nonlinearities(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = away_from_zero(&mut rng, &[4, 3]);
        check(&[a.clone()], |t, v| { let y = t.relu(v[0]); project(t, y, seed) });
        check(&[a], |t, v| { let y = t.sigmoid(v[0]); project(t, y, seed) });
        let p = rand_tensor(&mut rng, &[4, 3], 0.0, 3.0);
        check(&[p], |t, v| { let y = t.log1p(v[0]); project(t, y, seed) });
    }

    #[test]
    fn batch_norm(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 2, 2, 2], -2.0, 2.0);
        let g = rand_tensor(&mut rng, &[2], 0.5, 1.5);
        let b = rand_tensor(&mut rng, &[2], -0.5, 0.5);
        check(&[x.clone(), g.clone(), b.clone()], |t, v| {
            let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y, seed)
        });
        let mean = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let var = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        check(&[x, g, b], |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            project(t, y, seed)
        });
    }

    #[test]
    fn pooling(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = distinct(&mut rng, &[2, 2, 4, 4]);
        check(&[x.clone()], |t, v| { let y = t.maxpool2d(v[0], 2, 2)?; project(t, y, seed) });
        check(&[x.clone()], |t, v| { let y = t.global_max_pool(v[0])?; project(t, y, seed) });
        check(&[x], |t, v| { let y = t.global_avg_pool(v[0])?; project(t, y, seed) });
    }

    #[test]
    fn concat_and_index_select(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        check(&[a.clone(), b.clone()], |t, v| { let y = t.concat(&[v[0], v[1]], 0)?; project(t, y, seed) });
        check(&[a.clone(), b], |t, v| { let y = t.concat(&[v[0], v[1]], 1)?; project(t, y, seed) });
        check(&[a], |t, v| { let y = t.index_select(v[0], &[1, 0, 1])?; project(t, y, seed) });
    }

    #[test]
    fn l2_normalize_and_row_distance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        check(&[a.clone()], |t, v| { let y = t.l2_normalize(v[0])?; project(t, y, seed) });
        check(&[a, b], |t, v| { let y = t.row_distance(v[0], v[1])?; project(t, y, seed) });
    }

    #[test]
    fn binary_cross_entropy(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rand_tensor(&mut rng, &[2, 1, 3, 3], 0.05, 0.95);
        let target = Tensor::new([2, 1, 3, 3], (0..18).map(|_| rng.random_range(0..2) as f64).collect()).unwrap();
        check(&[p], |t, v| t.bce(v[0], &target));
    }

    #[test]
    fn inter_modal_loss_with_and_without_ground_truth(seed in any::<u64>(), gamma in 0.1f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins: Vec<Tensor> = (0..6).map(|_| rand_tensor(&mut rng, &[3, 5], -1.0, 1.0)).collect();
        let unit = |t: &mut Tape, v: &[Var]| -> Result<Vec<Var>> { v.iter().map(|&x| t.l2_normalize(x)).collect() };
        check(&ins, |t, v| {
            let u = unit(t, v)?;
            inter_modal_loss(t, Pair { p: u[0], q: u[1] }, Some(Pair { p: u[2], q: u[3] }), Pair { p: u[4], q: u[5] }, gamma)
        });
        check(&[ins[0].clone(), ins[1].clone(), ins[4].clone(), ins[5].clone()], |t, v| {
            let u = unit(t, v)?;
            inter_modal_loss(t, Pair { p: u[0], q: u[1] }, None, Pair { p: u[2], q: u[3] }, gamma)
        });
    }

    #[test]
    fn intra_modal_loss_gradient(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[3, 5], -1.0, 1.0)).collect();
        check(&ins, |t, v| {
            let u: Vec<Var> = v.iter().map(|&x| t.l2_normalize(x)).collect::<Result<_>>()?;
            intra_modal_loss(t, Pair { p: u[0], q: u[1] }, Pair { p: u[2], q: u[3] })
        });
    }
}
