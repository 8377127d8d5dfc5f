use std::sync::Arc;

use tapamp::derivatives::{finite_difference_tensor, PairSet, TangentWindow};
use tapamp::stats::ols;
use tapamp::{DisorderMatrix, IterationState, ModelParams, OnsagerChoice};

fn propagated(
    g: &DisorderMatrix,
    m1: &[f64],
    params: ModelParams,
    choice: OnsagerChoice,
    pairs: PairSet,
    k: usize,
) -> TangentWindow {
    let mut state = IterationState::init(m1, choice).unwrap();
    let mut window = TangentWindow::new(Arc::new(pairs));
    while state.k() < k {
        state.step(g, params, Some(window.current())).unwrap();
        window.advance(&state, g, params).unwrap();
    }
    window
}

fn log_slope(ns: &[usize], ys: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    ols(&xs, &ys).unwrap().slope
}

/// Entries `D[j; {y, z}]` with `j ∈ {y, z}` decay like `N^{-1/2}`, the others
/// like `N^{-1}`.
#[test]
fn tensor_entries_scale_with_their_connectivity() {
    let params = ModelParams::new(1.0, 0.5).unwrap();
    let ns = [50, 100, 200, 400];
    for k in [3, 4] {
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for &n in &ns {
            let (mut sin, mut cin, mut sout, mut cout) = (0.0, 0usize, 0.0, 0usize);
            for seed in 0..6 {
                let g = DisorderMatrix::sample(n, 100 + seed).unwrap();
                let m1 = vec![0.5f64.tanh(); n];
                let pairs = PairSet::incident_to(n, &[0, 1]).unwrap();
                let w = propagated(&g, &m1, params, OnsagerChoice::Classical, pairs, k);
                let d = w.current();
                for (p, &(y, z)) in d.pairs().pairs().iter().enumerate() {
                    for j in 0..n {
                        let v = d.data()[(p, j)];
                        if j == y || j == z {
                            sin += v * v;
                            cin += 1;
                        } else {
                            sout += v * v;
                            cout += 1;
                        }
                    }
                }
            }
            inside.push((sin / cin as f64).sqrt());
            outside.push((sout / cout as f64).sqrt());
        }
        let (a, b) = (log_slope(&ns, &inside), log_slope(&ns, &outside));
        assert!((a + 0.5).abs() < 0.4, "k = {k}: inside slope {a}");
        assert!((b + 1.0).abs() < 0.4, "k = {k}: outside slope {b}");
    }
}

/// The first-order closure for the re-centered choice drifts from the exact
/// derivative by an amount that shrinks with `N`.
#[test]
fn closure_error_shrinks_with_size() {
    let params = ModelParams::new(1.0, 0.5).unwrap();
    let k = 3;
    let ns = [8, 16, 32];
    let mut rms = Vec::new();
    for &n in &ns {
        let (mut s, mut c) = (0.0, 0usize);
        for seed in 0..4 {
            let g = DisorderMatrix::sample(n, 300 + seed).unwrap();
            let m1 = vec![0.5f64.tanh(); n];
            let w = propagated(&g, &m1, params, OnsagerChoice::SteinRecentering, PairSet::full(n), k);
            let exact = finite_difference_tensor(&g, &m1, params, OnsagerChoice::SteinRecentering, k, 1e-5).unwrap();
            let diff = w.current().data() - exact.data();
            s += diff.iter().map(|x| x * x).sum::<f64>();
            c += diff.len();
        }
        rms.push((s / c as f64).sqrt());
    }
    assert!(rms.iter().all(|&r| r > 0.0));
    assert!(rms.windows(2).all(|w| w[1] < w[0]), "{rms:?}");
}
