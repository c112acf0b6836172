mod common;

use common::oracle;
use common::problems::{random_problem, Problem};
use icenet_core::trainer::Objective;
use icenet_core::NetworkParams;

const H: f64 = 1e-6;
const ABS_TOL: f64 = 1e-8;
const REL_TOL: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-4;

fn oracle_total(p: &NetworkParams, pr: &Problem, rows: &[usize]) -> f64 {
    oracle::objective(p, &pr.schema, &pr.data, rows, &pr.constraints, Some(pr.scope), pr.exposure_scale)
        .parts
        .total()
}

/// Worst relative error over every parameter, or `None` when the point sits
/// too close to a kink to be differentiated numerically.
fn check(pr: &Problem) -> Option<(f64, usize, icenet_core::LossParts)> {
    let rows: Vec<usize> = (0..pr.data.len()).collect();
    let at = oracle::objective(
        &pr.params,
        &pr.schema,
        &pr.data,
        &rows,
        &pr.constraints,
        Some(pr.scope),
        pr.exposure_scale,
    );
    if at.margin < KINK_MARGIN {
        return None;
    }
    let obj = Objective::with_constraints(&pr.schema, pr.constraints.clone(), Some(pr.scope), pr.exposure_scale);
    let (parts, tape, _) = obj.loss_and_grad(&pr.params, &pr.data, &rows).unwrap();
    for (a, b) in [
        (parts.deviance, at.parts.deviance),
        (parts.smoothing, at.parts.smoothing),
        (parts.monotonicity, at.parts.monotonicity),
    ] {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "loss {a} vs oracle {b}");
    }
    let mut worst = 0.0f64;
    let mut count = 0;
    for s in 0..pr.params.slots().len() {
        for i in 0..pr.params.slots()[s].as_slice().len() {
            let mut plus = pr.params.clone();
            plus.slots_mut()[s].as_mut_slice()[i] += H;
            let mut minus = pr.params.clone();
            minus.slots_mut()[s].as_mut_slice()[i] -= H;
            let fd = (oracle_total(&plus, pr, &rows) - oracle_total(&minus, pr, &rows)) / (2.0 * H);
            let an = tape.slot(s).as_slice()[i];
            let abs = (an - fd).abs();
            let rel = abs / an.abs().max(fd.abs()).max(f64::MIN_POSITIVE);
            assert!(
                abs <= ABS_TOL || rel <= REL_TOL,
                "slot {s} entry {i}: analytic {an} numeric {fd} (rel {rel:.2e})"
            );
            if abs > ABS_TOL {
                worst = worst.max(rel);
            }
            count += 1;
        }
    }
    Some((worst, count, at.parts))
}

#[test]
fn compound_gradient_matches_finite_differences() {
    let mut accepted = 0;
    let mut seed = 0;
    let (mut smooth_seen, mut mono_seen, mut params_checked) = (0, 0, 0);
    while accepted < 25 {
        assert!(seed < 500, "too many configurations near a kink");
        let pr = random_problem(seed);
        seed += 1;
        if let Some((worst, n, parts)) = check(&pr) {
            assert!(worst < REL_TOL);
            smooth_seen += usize::from(parts.smoothing > 0.0);
            mono_seen += usize::from(parts.monotonicity > 0.0);
            params_checked += n;
            accepted += 1;
        }
    }
    eprintln!("{accepted} configurations ({} resampled), {params_checked} parameters", seed - accepted);
    assert!(smooth_seen >= 5 && mono_seen >= 5, "smooth {smooth_seen} mono {mono_seen}");
}

#[test]
fn zero_lambdas_reproduce_plain_deviance_bitwise() {
    for seed in 0..10 {
        let pr = random_problem(seed);
        let rows: Vec<usize> = (0..pr.data.len()).collect();
        let mut zeroed = pr.constraints.clone();
        for c in &mut zeroed {
            c.smooth_lambda = 0.0;
            c.mono_lambda = 0.0;
        }
        let fcn = Objective::with_constraints(&pr.schema, Vec::new(), None, false);
        let ice = Objective::with_constraints(&pr.schema, zeroed, Some(pr.scope), pr.exposure_scale);
        let (pa, ta, _) = fcn.loss_and_grad(&pr.params, &pr.data, &rows).unwrap();
        let (pb, tb, _) = ice.loss_and_grad(&pr.params, &pr.data, &rows).unwrap();
        assert_eq!(pa.total().to_bits(), pb.total().to_bits());
        assert_eq!(ta, tb);
    }
}

#[test]
fn parallel_and_serial_reductions_agree_bitwise() {
    let pr = random_problem(3);
    let mut data = pr.data.clone();
    for _ in 0..5 {
        data = stack(&data, &pr.data);
    }
    let rows: Vec<usize> = (0..data.len()).rev().collect();
    let obj = Objective::with_constraints(&pr.schema, pr.constraints.clone(), Some(pr.scope), false);
    let (pa, ta, _) = obj.clone().parallel(true).loss_and_grad(&pr.params, &data, &rows).unwrap();
    let (pb, tb, _) = obj.parallel(false).loss_and_grad(&pr.params, &data, &rows).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(ta, tb);
}

fn stack(a: &icenet_core::TabularDataset, b: &icenet_core::TabularDataset) -> icenet_core::TabularDataset {
    let mut rows: Vec<Vec<f64>> = (0..a.len()).map(|r| a.x_cont.row(r).to_vec()).collect();
    rows.extend((0..b.len()).map(|r| b.x_cont.row(r).to_vec()));
    icenet_core::TabularDataset {
        x_cont: icenet_core::Matrix::from_rows(&rows).unwrap(),
        x_cat: [a.x_cat.clone(), b.x_cat.clone()].concat(),
        n_cat: a.n_cat,
        y: [a.y.clone(), b.y.clone()].concat(),
        v: [a.v.clone(), b.v.clone()].concat(),
        ids: (1..=a.len() + b.len()).collect(),
    }
}

#[test]
fn forward_matches_loop_oracle() {
    for seed in 0..20 {
        let pr = random_problem(seed);
        let mu = pr.params.predict(&pr.data.x_cont, &pr.data.x_cat).unwrap();
        for (r, m) in mu.iter().enumerate() {
            let mut margin = f64::INFINITY;
            let o = oracle::forward_row(&pr.params, pr.data.x_cont.row(r), pr.data.cat_row(r), &mut margin);
            assert!((m - o).abs() <= 1e-12 * o.abs().max(1.0));
        }
    }
}

#[test]
fn glorot_weights_have_expected_spread() {
    use icenet_core::Architecture;
    let arch = Architecture::standard(40, vec![]).with_hidden(vec![60]);
    let p = NetworkParams::init(&arch, 11).unwrap();
    let w = p.weight(0).as_slice();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let expect_var = 2.0 / (40.0 + 60.0);
    // uniform(-a, a) variance a^2/3; its sample mean has sd sqrt(var/n)
    assert!(mean.abs() < 4.0 * (expect_var / n).sqrt());
    assert!((var - expect_var).abs() < 0.1 * expect_var);
    assert!(p.bias(0).as_slice().iter().all(|&b| b == 0.0));
}
