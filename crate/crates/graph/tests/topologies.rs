//! Quantizer insertion on small reference topologies, checked against
//! golden IR files. Set `TQT_BLESS=1` to regenerate them after an
//! intentional change.

use std::path::PathBuf;

use tqt_core::{Rng, Tensor64};
use tqt_graph::fixtures::{conv_relu6, FIXTURES, FIXTURE_INPUT};
use tqt_graph::passes::optimize;
use tqt_graph::{infer, insert_quant_layers, ExecOptions, Model, Op, PrecisionConfig};

const SHAPE: [usize; 4] = FIXTURE_INPUT;

fn quantized(build: fn(&mut Rng) -> Model) -> (Model, Model) {
    let float = build(&mut Rng::new(11));
    let mut m = float.clone();
    optimize(&mut m, &[SHAPE.to_vec()]).unwrap();
    let optimized = m.clone();
    insert_quant_layers(&mut m, PrecisionConfig::INT8).unwrap();
    (optimized, m)
}

#[test]
fn quantized_graphs_match_golden_files() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let bless = std::env::var_os("TQT_BLESS").is_some();
    for (name, build) in FIXTURES {
        let (_, m) = quantized(build);
        let text = m.graph.serialize();
        let path = dir.join(format!("{name}.ir"));
        if bless {
            std::fs::write(&path, &text).unwrap();
        }
        let golden = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(text, golden, "fixture {name} differs from its golden file");
    }
}

#[test]
fn optimization_preserves_the_function() {
    let mut rng = Rng::new(99);
    for (name, build) in FIXTURES {
        let float = build(&mut Rng::new(11));
        let (optimized, _) = quantized(build);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let x: Tensor64 = rng.normal_tensor(&SHAPE, 1.5);
            let a = infer(&float, &[x.clone()], &ExecOptions::float()).unwrap();
            let b = infer(&optimized, &[x], &ExecOptions::float()).unwrap();
            worst = worst.max(a[0].max_abs_diff(&b[0]).unwrap());
        }
        assert!(worst <= 1e-8, "{name}: max deviation {worst:e}");
    }
}

#[test]
fn insertion_is_idempotent() {
    for (name, build) in FIXTURES {
        let (_, once) = quantized(build);
        let mut twice = once.clone();
        insert_quant_layers(&mut twice, PrecisionConfig::INT8).unwrap();
        assert_eq!(twice.graph.serialize(), once.graph.serialize(), "{name}");
        assert_eq!(twice, once, "{name}");
    }
}

#[test]
fn int4_narrows_every_weight_quantizer() {
    for (_, build) in FIXTURES {
        let (mut m, _) = quantized(build);
        insert_quant_layers(&mut m, PrecisionConfig::INT4).unwrap();
        for n in &m.graph.nodes {
            if let Op::Quantize { bits, .. } = n.op {
                let src = m.graph.node(&n.inputs[0]).unwrap();
                let pool = src.id.starts_with("pool/");
                match src.op {
                    Op::Const { fixed: false, .. } if n.id.ends_with("/w/q") => assert_eq!(bits, 4, "{}", n.id),
                    _ if pool => assert_eq!(bits, 8),
                    _ => assert!(bits == 8 || bits == 16, "{}", n.id),
                }
            }
        }
    }
}

#[test]
fn saved_models_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    for (name, build) in FIXTURES {
        let (_, mut m) = quantized(build);
        for (k, l) in m.thresholds.values_mut().enumerate() {
            *l = -1.0 - 0.37 * k as f64;
        }
        let path = dir.path().join(name);
        m.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), m, "{name}");
    }
}

#[test]
fn quantized_execution_lands_on_the_output_grid() {
    let mut rng = Rng::new(5);
    let (optimized, mut m) = quantized(conv_relu6);
    for l in m.thresholds.values_mut() {
        *l = 6.0;
    }
    let x: Tensor64 = rng.normal_tensor(&SHAPE, 1.0);
    let float = infer(&optimized, &[x.clone()], &ExecOptions::float()).unwrap();
    let off = infer(&m, &[x.clone()], &ExecOptions::float()).unwrap();
    assert_eq!(off[0], float[0]);
    // Output group: unsigned 8-bit with t = 64, so a step of 1/4.
    let q = infer(&m, &[x], &ExecOptions::quantized()).unwrap();
    assert_ne!(q[0], float[0]);
    for &v in q[0].data() {
        assert!((0.0..=6.0).contains(&v) && (v * 4.0).fract() == 0.0, "{v}");
    }
}
