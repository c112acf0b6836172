//! Small random problems: data, schema, parameters and constraints.
#![allow(dead_code)]

use icenet_core::penalties::ResolvedConstraint;
use icenet_core::schema::GridPolicy;
use icenet_core::{
    Architecture, ColumnConstraint, ColumnRoles, ConstraintSpec, Direction, IceScope, NetworkParams,
    RawRecord, Schema, TabularDataset, WindowSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Problem {
    pub schema: Schema,
    pub data: TabularDataset,
    pub params: NetworkParams,
    pub spec: ConstraintSpec,
    pub constraints: Vec<ResolvedConstraint>,
    pub scope: IceScope,
    pub exposure_scale: bool,
}

pub fn records(rng: &mut ChaCha8Rng, n: usize, n_cont: usize, cards: &[usize]) -> Vec<RawRecord> {
    let levels: Vec<usize> = (0..n_cont).map(|_| rng.random_range(3..=9)).collect();
    let real: Vec<bool> = (0..n_cont).map(|_| rng.random_bool(0.3)).collect();
    (0..n)
        .map(|row| {
            let continuous = (0..n_cont)
                .map(|i| match (real[i], row) {
                    (_, 0) => 0.0,
                    (_, 1) => levels[i] as f64,
                    (true, _) => rng.random_range(0.0..levels[i] as f64),
                    (false, _) => rng.random_range(0..=levels[i]) as f64,
                })
                .collect();
            let categorical = cards
                .iter()
                .map(|&k| {
                    let code = if row < k { row } else { rng.random_range(0..k) };
                    format!("c{code}")
                })
                .collect();
            RawRecord {
                row: row + 1,
                response: rng.random_range(0..=3) as f64,
                exposure: rng.random_range(0.1..=1.0),
                continuous,
                categorical,
            }
        })
        .collect()
}

pub fn roles(n_cont: usize, n_cat: usize) -> ColumnRoles {
    ColumnRoles {
        response: "y".into(),
        exposure: "v".into(),
        continuous: (0..n_cont).map(|i| format!("x{i}")).collect(),
        categorical: (0..n_cat).map(|t| format!("z{t}")).collect(),
    }
}

fn random_spec(rng: &mut ChaCha8Rng, roles: &ColumnRoles) -> ConstraintSpec {
    loop {
        let mut cols = Vec::new();
        for name in roles.continuous.iter().chain(&roles.categorical) {
            if !rng.random_bool(0.6) {
                continue;
            }
            let smooth = if rng.random_bool(0.7) { rng.random_range(0.1..5.0) } else { 0.0 };
            let mono = if rng.random_bool(0.7) { rng.random_range(0.1..5.0) } else { 0.0 };
            let dir = if rng.random_bool(0.5) { Direction::Increasing } else { Direction::Decreasing };
            if smooth + mono > 0.0 {
                cols.push(ColumnConstraint::new(name, smooth, mono, dir));
            }
        }
        if !cols.is_empty() {
            return ConstraintSpec::new(cols);
        }
    }
}

/// A random architecture, dataset, parameter point and constraint set.
pub fn random_problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cont = rng.random_range(1..=3);
    let cards: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(2..=4)).collect();
    let n = rng.random_range(6..=10);
    let recs = records(&mut rng, n, n_cont, &cards);
    let roles = roles(n_cont, cards.len());
    let spec = random_spec(&mut rng, &roles);
    let policy = GridPolicy {
        distinct_cap: 8,
        percentiles: 100,
    };
    let schema = Schema::fit(&recs, &roles, &spec.column_names(), policy).unwrap();
    let data = schema.transform(&recs).unwrap();
    let hidden: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(2..=5)).collect();
    let mut arch = Architecture::standard(n_cont, schema.cardinalities()).with_hidden(hidden);
    arch.embedding_dims = arch
        .cardinalities
        .iter()
        .map(|&k| rng.random_range(1..=(k - 1).min(3)))
        .collect();
    let mut params = NetworkParams::init(&arch, rng.random()).unwrap();
    for slot in params.slots_mut() {
        for w in slot.as_mut_slice() {
            *w += rng.random_range(-0.3..0.3);
        }
    }
    let constraints = spec.resolve(&schema).unwrap();
    let scope = match rng.random_range(0..3) {
        0 => IceScope::Full,
        1 => IceScope::Window(WindowSpec::new(5).unwrap()),
        _ => IceScope::Window(WindowSpec::new(7).unwrap()),
    };
    Problem {
        schema,
        data,
        params,
        spec,
        constraints,
        scope,
        exposure_scale: rng.random_bool(0.3),
    }
}
