//! Shared fixtures for the benchmarks.

use icenet_core::schema::GridPolicy;
use icenet_core::{
    Architecture, ColumnConstraint, ConstraintSpec, Direction, NetworkParams, Schema, SplitIndices, SynthSpec,
    TabularDataset,
};

pub struct Fixture {
    pub schema: Schema,
    pub data: TabularDataset,
    pub spec: ConstraintSpec,
    pub params: NetworkParams,
}

/// Synthetic portfolio of `rows` policies, a three-column constraint set
/// and a freshly initialised standard network.
pub fn fixture(rows: usize) -> Fixture {
    let synth = SynthSpec { rows, ..SynthSpec::default() };
    let recs = synth.generate().expect("synthetic data");
    let split = SplitIndices::new(recs.len(), 0.1, 0.05, 1).expect("split");
    let fit: Vec<_> = split.fit_rows().iter().map(|&i| recs[i].clone()).collect();
    let spec = ConstraintSpec::new(vec![
        ColumnConstraint::new("age", 10.0, 0.0, Direction::Increasing),
        ColumnConstraint::new("bonus", 1.0, 100.0, Direction::Increasing),
        ColumnConstraint::new("density", 1.0, 100.0, Direction::Increasing),
    ]);
    let schema = Schema::fit(&fit, &synth.roles(), &spec.column_names(), GridPolicy::default()).expect("schema");
    let data = schema.transform(&recs).expect("transform");
    let arch = Architecture::standard(schema.n_continuous(), schema.cardinalities());
    let params = NetworkParams::init(&arch, 1).expect("init");
    Fixture { schema, data, spec, params }
}
