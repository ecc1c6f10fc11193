//! Central finite-difference validation of analytic gradients.
//!
//! Every differentiable building block in this crate is checked against
//! `(f(x + h) - f(x - h)) / 2h` in `f64`. The checker rebuilds the graph
//! from scratch for each probe, so it validates the full forward pass, not
//! just one op's backward formula.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tid};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Worst relative error seen across all probed coordinates.
    pub max_rel_err: f64,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Number of coordinates probed.
    pub checked: usize,
}

/// Probe each input tensor at up to `probes_per_input` coordinates (all of
/// them if the tensor is that small) and compare analytic gradients against
/// central differences.
///
/// * `build` must construct the same scalar loss from the given leaves every
///   time it is called; it runs `1 + 2 * total_probes` times.
/// * `h_scale` sets the step as `h = h_scale * max(1, |x|)` per coordinate.
/// * Relative error uses `max(|analytic|, |numeric|, 1e-6)` as denominator;
///   the floor keeps genuinely-zero gradients from dividing 0 by 0.
pub fn check_gradients(
    inputs: &[ArrayD<f64>],
    probes_per_input: usize,
    h_scale: f64,
    seed: u64,
    build: &mut dyn FnMut(&mut Graph, &[Tid]) -> Tid,
) -> FdReport {
    let mut g = Graph::new();
    let tids: Vec<Tid> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    let loss = build(&mut g, &tids);
    let grads = g.backward(loss);
    let analytic: Vec<ArrayD<f64>> = tids
        .iter()
        .zip(inputs)
        .map(|(&t, v)| grads.get_or_zeros(t, v.shape()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };

    for (idx, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = if n <= probes_per_input {
            (0..n).collect()
        } else {
            (0..probes_per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for coord in coords {
            let base = input.as_slice().expect("standard layout")[coord];
            let h = h_scale * base.abs().max(1.0);
            let eval = |value: f64, build: &mut dyn FnMut(&mut Graph, &[Tid]) -> Tid| -> f64 {
                let mut g2 = Graph::new();
                let tids2: Vec<Tid> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let mut v = v.clone();
                        if j == idx {
                            v.as_slice_mut().expect("standard layout")[coord] = value;
                        }
                        g2.leaf(v)
                    })
                    .collect();
                let l = build(&mut g2, &tids2);
                g2.scalar(l)
            };
            let plus = eval(base + h, build);
            let minus = eval(base - h, build);
            let numeric = (plus - minus) / (2.0 * h);
            let an = analytic[idx].as_slice().expect("standard layout")[coord];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((idx, coord, an, numeric));
            }
        }
    }
    report
}
