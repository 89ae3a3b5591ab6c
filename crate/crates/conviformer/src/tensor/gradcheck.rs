//! Central finite differences against tape gradients.
//!
//! The checker only ever calls the forward computation; it never touches the
//! reverse pass it is validating. Checks run at f64 where central differences
//! resolve ~1e-10 relative error at unit scale.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Result, Tape, Tensor};

/// Below this magnitude on both sides, a coordinate is treated as zero and
/// auto-passes (central differences cannot resolve it).
pub const FD_FLOOR: f64 = 1e-7;

/// Default central-difference step for f64 probes at unit scale.
pub const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<String>,
}

impl FdReport {
    pub fn merge(&mut self, other: &FdReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
    }

    pub fn empty() -> Self {
        FdReport { checked: 0, max_rel_err: 0.0, worst: None }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < FD_FLOOR {
        return 0.0;
    }
    (a - b).abs() / scale
}

/// Compare analytic gradients of `f` against central differences on
/// `probes` coordinates per input (all coordinates when the tensor is
/// smaller). `f` maps the flat input buffers to a scalar.
pub fn check_scalar_fn(
    inputs: &[Vec<f64>],
    names: &[&str],
    analytic: &[Vec<f64>],
    mut f: impl FnMut(&[Vec<f64>]) -> f64,
    probes: usize,
    seed: u64,
    eps: f64,
) -> FdReport {
    assert_eq!(inputs.len(), analytic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::empty();
    let mut work: Vec<Vec<f64>> = inputs.to_vec();

    for (ti, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if input.len() <= probes {
            (0..input.len()).collect()
        } else {
            (0..probes).map(|_| rng.gen_range(0..input.len())).collect()
        };
        for &ci in &coords {
            let orig = input[ci];
            work[ti][ci] = orig + eps;
            let up = f(&work);
            work[ti][ci] = orig - eps;
            let down = f(&work);
            work[ti][ci] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic[ti][ci];
            let err = rel_err(fd, an);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(format!(
                    "{}[{}]: analytic {:.6e} vs fd {:.6e}",
                    names.get(ti).copied().unwrap_or("?"),
                    ci,
                    an,
                    fd
                ));
            }
        }
    }
    report
}

/// Gradient-check a tape computation. `build` receives leaf handles (same
/// order as `inputs`) and returns any tensor; the checker scalarizes it by a
/// fixed random projection so errors cannot cancel across elements.
pub fn check_op(
    inputs: &[(Vec<f64>, Vec<usize>)],
    build: impl Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>,
    probes: usize,
    seed: u64,
    eps: f64,
) -> Result<FdReport> {
    let trace = |bufs: &[Vec<f64>]| -> Result<(Tape<f64>, Vec<Tensor>, Tensor)> {
        let mut tape: Tape<f64> = Tape::new();
        let leaves: Vec<Tensor> = bufs
            .iter()
            .zip(inputs)
            .map(|(buf, (_, shape))| tape.leaf(buf.clone(), shape.clone(), true))
            .collect::<Result<_>>()?;
        let out = build(&mut tape, &leaves)?;

        // Fixed projection weights, independent of the probed coordinate,
        // so elementwise errors cannot cancel in the scalarization.
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let weights: Vec<f64> = (0..out.numel()).map(|_| wrng.gen_range(-1.0..1.0)).collect();
        let w = tape.constant(weights, out.shape().to_vec())?;
        let prod = tape.mul(&out, &w)?;
        let loss = tape.reduce_sum(&prod, None)?;
        Ok((tape, leaves, loss))
    };

    let bufs: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let (tape, leaves, loss) = trace(&bufs)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| grads.get(l).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    Ok(check_scalar_fn(
        &bufs,
        &name_refs,
        &analytic,
        |b| {
            let (t, _, l) = trace(b).expect("forward eval");
            t.scalar_value(&l)
        },
        probes,
        seed,
        eps,
    ))
}

/// Deterministic test fixture data in [-1, 1).
pub fn fixture(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Positive fixture data in [lo, hi), for log/sqrt domains.
pub fn fixture_in(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

impl<T: Element> Tape<T> {
    /// Convenience for tests: leaf from f64 literals.
    pub fn leaf_f64(&mut self, data: &[f64], shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        let converted: Vec<T> = data.iter().map(|&v| T::from_f64(v)).collect();
        self.leaf(converted, shape, requires_grad)
    }
}
