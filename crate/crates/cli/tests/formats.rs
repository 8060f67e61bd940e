//! Round-trip and error-path tests for the on-disk formats.

use std::fs;
use std::path::Path;
use std::time::Instant;

use netcons::config::SimConfig;
use netcons::formats::{
    read_graph, read_model, read_trace, write_graph, write_model, write_trace,
};
use netcons_core::schmm::{sample_trace, DelayTrace, SchmmModel, DIRAC_SIGMA_MS};
use netcons_core::topology::Topology;
use netcons_core::DEFAULT_MASK_MS;

fn model_fixture() -> SchmmModel {
    SchmmModel::new(
        3,
        4,
        vec![0.4215, 0.4572, 0.1213],
        vec![
            0.6832, 0.2079, 0.1089, //
            0.2894, 0.5538, 0.1568, //
            0.1245, 0.3761, 0.4994,
        ],
        vec![
            0.0221, 0.4528, 0.3647, 0.1604, //
            0.0213, 0.5327, 0.2934, 0.1526, //
            0.0198, 0.5021, 0.3504, 0.1277,
        ],
        vec![46.00, 49.85, 58.17, DEFAULT_MASK_MS],
        vec![0.4149, 1.0733, 2.9872, DIRAC_SIGMA_MS],
        DEFAULT_MASK_MS,
    )
    .unwrap()
}

#[test]
fn trace_file_parses_with_dropouts_and_comments() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.trace");
    fs::write(&path, "# header\n46.0\n100000\n58.2\n").unwrap();
    let trace = read_trace(&path, DEFAULT_MASK_MS).unwrap();
    assert_eq!(trace.len(), 3);
    assert_eq!(trace.dropout_count(), 1);
    assert_eq!(trace.samples()[0], 46.0);
}

#[test]
fn trace_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.trace");
    let model = model_fixture();
    let trace = sample_trace(&model, 500, 3).unwrap();
    write_trace(&path, &trace).unwrap();
    let back = read_trace(&path, DEFAULT_MASK_MS).unwrap();
    assert_eq!(trace, back);
    // dropouts must appear literally as the mask integer
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.lines().any(|l| l == "100000"));
}

#[test]
fn trace_parse_error_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.trace");
    fs::write(&path, "46.0\nnot-a-number\n").unwrap();
    let err = read_trace(&path, DEFAULT_MASK_MS).unwrap_err();
    assert!(err.to_string().contains(":2"), "{err}");
}

#[test]
fn large_trace_parses_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.trace");
    let model = model_fixture();
    let trace = sample_trace(&model, 10_000, 9).unwrap();
    write_trace(&path, &trace).unwrap();
    let start = Instant::now();
    let back = read_trace(&path, DEFAULT_MASK_MS).unwrap();
    assert_eq!(back.len(), 10_000);
    assert!(
        start.elapsed().as_secs_f64() < 1.0,
        "parse took {:?}",
        start.elapsed()
    );
}

#[test]
fn model_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.model");
    let model = model_fixture();
    write_model(&path, &model).unwrap();
    let back = read_model(&path).unwrap();
    assert_eq!(model, back);
    // a second save must produce identical bytes
    let first = fs::read(&path).unwrap();
    write_model(&path, &back).unwrap();
    assert_eq!(first, fs::read(&path).unwrap());
}

#[test]
fn model_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.model");
    fs::write(&path, "n_states 1\nbogus 3\n").unwrap();
    assert!(read_model(&path).is_err());
}

#[test]
fn graph_roundtrip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.graph");
    let topology = Topology::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
    write_graph(&path, &topology).unwrap();
    let back = read_graph(&path).unwrap();
    assert_eq!(topology, back);

    // disconnected graph is rejected on load
    fs::write(&path, "0 1\n2 3\n").unwrap();
    let err = read_graph(&path).unwrap_err();
    assert!(err.to_string().contains("not connected"), "{err}");
}

#[test]
fn config_roundtrips_through_serialization() {
    let text = r#"
steps = 100
master_seed = 7
output_dir = "out"
eta = 0.1
agent_model = "agent.model"

[graph]
complete = 4

[dynamics]
template = "double-integrator-3d"

[channel]
constant_ms = 10.0

[weights]
p_diag = [10.0, 10.0, 10.0, 1.0, 1.0, 1.0]
q_scale = 0.1
"#;
    let parsed: SimConfig = toml::from_str(text).unwrap();
    parsed.validate().unwrap();
    let serialized = parsed.to_toml().unwrap();
    let reparsed: SimConfig = toml::from_str(&serialized).unwrap();
    assert_eq!(parsed, reparsed);
}

#[test]
fn config_errors_name_the_field() {
    let bad = r#"
steps = 0
master_seed = 7
output_dir = "out"
agent_model = "agent.model"

[graph]
complete = 4

[dynamics]
template = "double-integrator-3d"

[channel]
constant_ms = 10.0
"#;
    let parsed: SimConfig = toml::from_str(bad).unwrap();
    let err = parsed.validate().unwrap_err();
    assert!(err.to_string().contains("steps"), "{err}");

    let two_channels = bad.replace("steps = 0", "steps = 5").replace(
        "constant_ms = 10.0",
        "constant_ms = 10.0\ntrace = \"x.trace\"",
    );
    let parsed: SimConfig = toml::from_str(&two_channels).unwrap();
    let err = parsed.validate().unwrap_err();
    assert!(err.to_string().contains("channel"), "{err}");
}

#[test]
fn trace_with_wrong_mask_value_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.trace");
    fs::write(&path, "46.0\n-3.0\n").unwrap();
    let err = read_trace(&path, DEFAULT_MASK_MS).unwrap_err();
    assert!(err.to_string().contains("invalid trace"), "{err}");
}

#[test]
fn sampled_quantized_trace_has_midpoint_values() {
    let model = model_fixture();
    let trace = sample_trace(&model, 2_000, 11).unwrap().quantized(10.0);
    for &v in trace.samples() {
        if v != DEFAULT_MASK_MS {
            let frac = v % 10.0;
            assert!((frac - 5.0).abs() < 1e-9, "value {v} is not a bin midpoint");
        }
    }
    let trace2 =
        DelayTrace::new(trace.samples().to_vec(), DEFAULT_MASK_MS).unwrap();
    assert_eq!(trace2.quantized(10.0), trace);
}

#[test]
fn bundled_example_configs_build() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["example1.toml", "example2.toml"] {
        let path = root.join(name);
        let cfg = SimConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        let setup = cfg
            .build_setup(&root)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(setup.dynamics[0].state_dim(), 6);
        assert_eq!(setup.dynamics[0].input_dim(), 4);
        // value-level round trip through the serializer
        let text = cfg.to_toml().unwrap();
        let back: SimConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
    let one = SimConfig::load(&root.join("example1.toml")).unwrap();
    let two = SimConfig::load(&root.join("example2.toml")).unwrap();
    assert_eq!(one.build_setup(&root).unwrap().topology.n_agents(), 9);
    assert_eq!(two.build_setup(&root).unwrap().topology.n_agents(), 7);
}

#[test]
fn explicit_dynamics_matrices_build() {
    let dir = tempfile::tempdir().unwrap();
    let model = model_fixture();
    write_model(&dir.path().join("agent.model"), &model).unwrap();
    let text = r#"
steps = 10
master_seed = 1
output_dir = "out"
agent_model = "agent.model"

[graph]
complete = 2

[dynamics]
a = [[1.0, 0.1], [0.0, 1.0]]
b = [[0.005], [0.1]]
translational = [0]

[channel]
constant_ms = 10.0
"#;
    let path = dir.path().join("run.toml");
    fs::write(&path, text).unwrap();
    let cfg = SimConfig::load(&path).unwrap();
    let setup = cfg.build_setup(dir.path()).unwrap();
    assert_eq!(setup.dynamics[0].state_dim(), 2);
    assert_eq!(setup.dynamics[0].input_dim(), 1);
    assert_eq!(setup.dynamics[0].translational, vec![0]);

    // ragged matrices are rejected with a field-naming error
    let bad = text.replace("[[1.0, 0.1], [0.0, 1.0]]", "[[1.0, 0.1], [0.0]]");
    fs::write(&path, bad).unwrap();
    let cfg = SimConfig::load(&path).unwrap();
    let err = cfg.build_setup(dir.path()).unwrap_err();
    assert!(err.to_string().contains("dynamics"), "{err}");
}
