//! Finite-difference validation of the autodiff tape and the binarized
//! weight gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binarize::{binarize_filter, ste_backward};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_NETWORKS: usize = 50;

/// Minimum distance of any leaky-ReLU input from 0 and of any pooling
/// window's runner-up from its maximum; points closer than this to a kink
/// are resampled.
const KINK_MARGIN: f64 = 1e-3;

/// Coordinates whose gradient is far below the largest one are compared
/// against this fraction of the gradient's ∞-norm.
const SCALE_FLOOR: f64 = 1e-3;

/// Largest relative disagreement between analytic and central-difference
/// gradients over all coordinates, `|a − c| / max(|a|, |c|, s)` with
/// `s = max(1e-3 · ‖g‖∞, 1e-8)`.
///
/// `f` returns the loss and its analytic gradient at a point.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let (_, analytic) = f(point)?;
    point.check_same_shape(&analytic)?;
    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let (up, _) = f(&probe)?;
        probe.data_mut()[i] = x0 - eps;
        let (down, _) = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        numeric.push((up - down) / (2.0 * eps));
    }
    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (SCALE_FLOOR * inf_norm(analytic.data()).max(inf_norm(&numeric))).max(1e-8);
    Ok(analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(a, c)| (a - c).abs() / a.abs().max(c.abs()).max(floor))
        .fold(0.0, f64::max))
}

/// A small random network exercising every tape operation:
///
/// ```text
/// x → conv3x3 → leaky → bn(batch) → pool ─┬─ conv3x3 → bn(fixed) → leaky → pool ─┐
///                                         └─ reorg ─────────────────────────────── concat → conv1x1
/// ```
///
/// The loss is `Σ r·y` for a fixed random probe `r`.
pub struct MiniNet {
    batch: usize,
    c_in: usize,
    c1: usize,
    c2: usize,
    c3: usize,
    bn_mean: Tensor<f64>,
    bn_var: Tensor<f64>,
    probe: Tensor<f64>,
    /// Input and parameters, flattened in a fixed order.
    pub point: Tensor<f64>,
}

const SIDE: usize = 8;
const SLOPE: f64 = 0.1;
const BN_EPS: f64 = 1e-3;

impl MiniNet {
    fn part_sizes(&self) -> [usize; 11] {
        let (n, ci, c1, c2, c3) = (self.batch, self.c_in, self.c1, self.c2, self.c3);
        [n * ci * SIDE * SIDE, c1 * ci * 9, c1, c1, c1, c2 * c1 * 9, c2, c2, c2, c3 * (4 * c1 + c2), c3]
    }

    fn random(rng: &mut ChaCha8Rng) -> Self {
        let batch = 2;
        let c_in = rng.random_range(1..=3);
        let c1 = rng.random_range(2..=4);
        let c2 = rng.random_range(2..=4);
        let c3 = rng.random_range(1..=3);
        let bn_mean = Tensor::from_fn(&[c2], |_| rng.random_range(-0.2..0.2));
        let bn_var = Tensor::from_fn(&[c2], |_| rng.random_range(0.5..2.0));
        let probe = Tensor::from_fn(&[batch, c3, 2, 2], |_| rng.random_range(-1.0..1.0));
        let mut net = Self { batch, c_in, c1, c2, c3, bn_mean, bn_var, probe, point: Tensor::zeros(&[1]) };
        let sizes = net.part_sizes();
        let mut data = Vec::new();
        for (part, &len) in sizes.iter().enumerate() {
            for _ in 0..len {
                data.push(match part {
                    // gammas near one keep the normalized signal alive
                    3 | 7 => rng.random_range(0.5..1.5),
                    0 => rng.random_range(-1.0..1.0),
                    _ => rng.random_range(-0.5..0.5),
                });
            }
        }
        net.point = Tensor::from_vec(data);
        net
    }

    /// Draws networks until one sits at least [`KINK_MARGIN`] away from every
    /// non-differentiable point.
    pub fn sample(rng: &mut ChaCha8Rng) -> Result<Self> {
        loop {
            let net = Self::random(rng);
            if net.run(&net.point)?.2 >= KINK_MARGIN {
                return Ok(net);
            }
        }
    }

    /// Loss, gradient w.r.t. the flat point, and kink margin.
    fn run(&self, point: &Tensor<f64>) -> Result<(f64, Tensor<f64>, f64)> {
        let (n, ci, c1, c2, c3) = (self.batch, self.c_in, self.c1, self.c2, self.c3);
        let shapes: [Vec<usize>; 11] = [
            vec![n, ci, SIDE, SIDE],
            vec![c1, ci, 3, 3],
            vec![c1],
            vec![c1],
            vec![c1],
            vec![c2, c1, 3, 3],
            vec![c2],
            vec![c2],
            vec![c2],
            vec![c3, 4 * c1 + c2, 1, 1],
            vec![c3],
        ];
        let mut tape = Tape::<f64>::new();
        let mut vars = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for shape in &shapes {
            let len: usize = shape.iter().product();
            vars.push(tape.param(Tensor::new(shape, point.data()[off..off + len].to_vec())?));
            off += len;
        }
        let [x, wa, ba, ga, bta, wb, bb, gb, btb, wc, bc] = vars[..] else { unreachable!() };
        let a = tape.conv2d(x, wa, ba, 1, 1)?;
        let mut margin = min_abs(tape.value(a));
        let a = tape.leaky_relu(a, SLOPE)?;
        let a = tape.batch_norm_train(a, ga, bta, BN_EPS)?.out;
        margin = margin.min(pool_gap(tape.value(a)));
        let p1 = tape.max_pool2(a)?;
        let b = tape.conv2d(p1, wb, bb, 1, 1)?;
        let b = tape.batch_norm_infer(b, gb, btb, &self.bn_mean, &self.bn_var, BN_EPS)?;
        margin = margin.min(min_abs(tape.value(b)));
        let b = tape.leaky_relu(b, SLOPE)?;
        margin = margin.min(pool_gap(tape.value(b)));
        let p2 = tape.max_pool2(b)?;
        let r = tape.reorg2(p1)?;
        let cat = tape.concat(r, p2)?;
        let y = tape.conv2d(cat, wc, bc, 1, 0)?;

        let out = tape.value(y);
        let loss: f64 = out.data().iter().zip(self.probe.data()).map(|(o, r)| r * o).sum();
        let seed = self.probe.clone();
        let grads = tape.backward(vec![(y, seed)])?;
        let mut flat = Vec::with_capacity(point.len());
        for &v in &vars {
            flat.extend_from_slice(grads.get_or_zeros(v, tape.value(v)).data());
        }
        Ok((loss, Tensor::from_vec(flat), margin))
    }

    pub fn loss_and_grad(&self, point: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let (l, g, _) = self.run(point)?;
        Ok((l, g))
    }
}

fn min_abs(t: &Tensor<f64>) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))
}

fn pool_gap(t: &Tensor<f64>) -> f64 {
    let (n, c, h, w) = t.nchw().expect("4-d activation");
    let x = t.data();
    let mut gap = f64::INFINITY;
    for plane in 0..n * c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let r0 = plane * h * w + 2 * oy * w + 2 * ox;
                let mut v = [x[r0], x[r0 + 1], x[r0 + w], x[r0 + w + 1]];
                v.sort_by(|a, b| b.total_cmp(a));
                gap = gap.min(v[0] - v[1]);
            }
        }
    }
    gap
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub networks: usize,
    /// Worst autodiff-vs-central-difference relative error over all networks.
    pub max_network_error: f64,
    /// Worst absolute deviation of the binarized-weight gradient from the formula.
    pub ste_max_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_network_error <= NETWORK_TOLERANCE && self.ste_max_error == 0.0
    }
}

/// Checks `count` random mini-networks and the binarized-weight gradient map.
pub fn run_suite(seed: u64, count: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let net = MiniNet::sample(&mut rng)?;
        let err = finite_diff_check(|p| net.loss_and_grad(p), &net.point, DEFAULT_EPS)?;
        worst = worst.max(err);
    }
    Ok(GradcheckReport { networks: count, max_network_error: worst, ste_max_error: ste_formula_check(&mut rng, 200)? })
}

/// Compares [`ste_backward`] with a scalar evaluation of
/// `g_i · (1/n + 1{|w_i| ≤ 1} · mean|w|)` on random filters.
pub fn ste_formula_check(rng: &mut ChaCha8Rng, filters: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..filters {
        let n = rng.random_range(1..=64);
        let w = Tensor::from_fn(&[n], |_| rng.random_range(-2.0..2.0));
        let g = Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0));
        let got = ste_backward(&g, &w, &binarize_filter(&w)?)?;
        let mut l1 = 0.0;
        for &x in w.data() {
            l1 += f64::abs(x);
        }
        let alpha = l1 / n as f64;
        for i in 0..n {
            let indicator = if w.data()[i].abs() <= 1.0 { 1.0 } else { 0.0 };
            let want = g.data()[i] * (1.0 / n as f64 + indicator * alpha);
            worst = worst.max((got.data()[i] - want).abs());
        }
    }
    Ok(worst)
}
