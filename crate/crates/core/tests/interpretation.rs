mod common;

use common::problems::random_problem;
use icenet_core::interpret::{
    audit, export_audit, ice_curves, mean_scores, pdp, read_audit, score_differences, worst_offenders, ScoreKind,
};
use icenet_core::schema::GridPolicy;
use icenet_core::{
    Architecture, ColumnConstraint, ColumnRoles, ConstraintSpec, Direction, IceScope, Matrix, NetworkParams,
    PdpWeighting, RawRecord, Schema, WindowSpec,
};

#[test]
fn pdp_is_the_average_ice_curve() {
    for seed in 0..10 {
        let pr = random_problem(seed);
        for grid in &pr.schema.grids {
            let curves = ice_curves(&pr.params, &pr.data, grid).unwrap();
            let n = pr.data.len() as f64;
            let total_v: f64 = pr.data.v.iter().sum();
            let mean = pdp(&pr.params, &pr.data, grid, PdpWeighting::Mean).unwrap();
            let by_exposure = pdp(&pr.params, &pr.data, grid, PdpWeighting::Exposure).unwrap();
            for k in 0..grid.len() {
                let s: f64 = curves.iter().map(|c| c[k]).sum();
                assert!((mean[k] - s / n).abs() < 1e-12);
                assert!((by_exposure[k] - s / total_v).abs() < 1e-12);
            }
        }
    }
}

/// `mu = exp(relu(x))` on one continuous input: increasing in `x`.
fn increasing_model() -> (Schema, icenet_core::TabularDataset) {
    let recs: Vec<RawRecord> = (0..20)
        .map(|i| RawRecord {
            row: i + 1,
            response: 0.0,
            exposure: 1.0,
            continuous: vec![i as f64],
            categorical: vec![],
        })
        .collect();
    let roles = ColumnRoles {
        response: "y".into(),
        exposure: "v".into(),
        continuous: vec!["x".into()],
        categorical: vec![],
    };
    let schema = Schema::fit(&recs, &roles, &["x".into()], GridPolicy::default()).unwrap();
    let data = schema.transform(&recs).unwrap();
    (schema, data)
}

fn params(w: f64) -> NetworkParams {
    let arch = Architecture::standard(1, vec![]).with_hidden(vec![1]);
    let slots = vec![
        Matrix::from_vec(1, 1, vec![w]).unwrap(),
        Matrix::zeros(1, 1),
        Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
        Matrix::zeros(1, 1),
    ];
    NetworkParams::from_slots(arch, slots).unwrap()
}

#[test]
fn monotone_model_scores_zero_in_its_own_direction() {
    let (schema, data) = increasing_model();
    let p = params(2.0);
    let inc = ConstraintSpec::new(vec![ColumnConstraint::new("x", 1.0, 1.0, Direction::Increasing)]);
    let dec = ConstraintSpec::new(vec![ColumnConstraint::new("x", 1.0, 1.0, Direction::Decreasing)]);
    let a = audit(&p, &data, &schema, &inc, IceScope::Full).unwrap();
    let b = audit(&p, &data, &schema, &dec, IceScope::Full).unwrap();
    assert!(a.iter().all(|s| s.mono_score == 0.0));
    // exp(2s) over the grid: the whole rise is a violation when decreasing
    let rise = (2.0f64).exp() - 1.0;
    assert!(b.iter().all(|s| (s.mono_score - rise).abs() < 1e-12));
    assert!(a.iter().all(|s| s.smooth_score > 0.0));
    let diff = score_differences(&b, &a).unwrap();
    assert!(diff.iter().all(|d| (d.mono_score - rise).abs() < 1e-12 && d.smooth_score == 0.0));
}

#[test]
fn constant_model_scores_zero() {
    let (schema, data) = increasing_model();
    let p = params(0.0);
    let spec = ConstraintSpec::new(vec![ColumnConstraint::new("x", 1.0, 1.0, Direction::Decreasing)]);
    let scores = audit(&p, &data, &schema, &spec, IceScope::Full).unwrap();
    assert!(scores.iter().all(|s| s.mono_score == 0.0 && s.smooth_score == 0.0));
    assert_eq!(mean_scores(&scores), vec![("x".to_string(), 0.0, 0.0)]);
}

#[test]
fn window_scores_never_exceed_full_grid_scores() {
    for seed in 0..20 {
        let pr = random_problem(seed);
        let w = WindowSpec::new(5).unwrap();
        let full = audit(&pr.params, &pr.data, &pr.schema, &pr.spec, IceScope::Full).unwrap();
        let local = audit(&pr.params, &pr.data, &pr.schema, &pr.spec, IceScope::Window(w)).unwrap();
        for (f, l) in full.iter().zip(&local) {
            assert!(l.mono_score <= f.mono_score + 1e-15);
            assert!(l.smooth_score <= f.smooth_score + 1e-15);
        }
    }
}

#[test]
fn audit_export_round_trips_and_ranks() {
    let pr = random_problem(4);
    let scores = audit(&pr.params, &pr.data, &pr.schema, &pr.spec, IceScope::Full).unwrap();
    let mut buf = Vec::new();
    export_audit(&scores, &mut buf).unwrap();
    let back = read_audit(buf.as_slice()).unwrap();
    assert_eq!(back.len(), scores.len());
    for (a, b) in scores.iter().zip(&back) {
        assert_eq!(a.instance_id, b.instance_id);
        assert!((a.mono_score - b.mono_score).abs() <= 1e-11 * a.mono_score.abs().max(1e-300));
    }
    let col = &pr.spec.columns[0].column;
    let top = worst_offenders(&scores, col, ScoreKind::Mono, 3);
    assert!(top.windows(2).all(|w| w[0].mono_score >= w[1].mono_score));
    let best = scores.iter().filter(|s| &s.column == col).map(|s| s.mono_score).fold(0.0, f64::max);
    assert_eq!(top[0].mono_score, best);
}
