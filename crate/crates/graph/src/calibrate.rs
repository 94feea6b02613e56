//! Threshold initialization for every quantizer group of a model.

use std::collections::BTreeSet;

use tqt_core::calib::{CalibRecord, InitPolicy};
use tqt_core::Tensor64;

use crate::error::{GraphError, Result};
use crate::exec::{forward, ExecOptions};
use crate::ir::Op;
use crate::model::{GroupInfo, Model};

fn is_weight_group(model: &Model, info: &GroupInfo) -> bool {
    info.members.iter().all(|m| {
        let src = &model.graph.node(m).unwrap().inputs[0];
        matches!(model.graph.node(src).map(|n| &n.op), Some(Op::Const { .. }))
    })
}

fn member_inputs(model: &Model, info: &GroupInfo) -> Vec<String> {
    info.members
        .iter()
        .map(|m| model.graph.node(m).unwrap().inputs[0].clone())
        .collect()
}

/// Sets `log2 t` for every group. Weight-only groups use `policy.weights`
/// on the constant values. The remaining groups are visited in topological
/// order, each calibrated with `policy.activations` on the values reaching
/// its members while all groups calibrated so far quantize (later ones
/// pass values through).
pub fn calibrate(model: &mut Model, batches: &[Vec<Tensor64>], policy: InitPolicy) -> Result<Vec<CalibRecord>> {
    let groups = model.groups()?;
    let mut records = Vec::with_capacity(groups.len());
    let mut done = BTreeSet::new();
    let mut set = |model: &mut Model, name: &str, info: &GroupInfo, method: String, t: f64| {
        model.thresholds.insert(name.to_string(), t.log2());
        records.push(CalibRecord {
            tensor: name.to_string(),
            method,
            threshold: t,
            bits: info.bits,
            signed: info.signed,
        });
    };

    let weight_groups: Vec<&(String, GroupInfo)> =
        groups.iter().filter(|(_, i)| is_weight_group(model, i)).collect();
    for (name, info) in weight_groups {
        let data: Vec<f64> = member_inputs(model, info)
            .iter()
            .map(|c| model.const_tensor(c).map(|t| t.data().to_vec()))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let t = policy
            .weights
            .calibrate(&Tensor64::from_vec(data), info.bits, info.signed)?;
        set(model, name, info, policy.weights.to_string(), t);
        done.insert(name.clone());
    }

    let activation: Vec<&(String, GroupInfo)> =
        groups.iter().filter(|(n, _)| !done.contains(n)).collect();
    if !activation.is_empty() && batches.is_empty() {
        return Err(GraphError::invalid(&activation[0].0, "activation calibration needs data"));
    }
    for (name, info) in activation {
        let opts = ExecOptions {
            quantize: true,
            active_groups: Some(done.clone()),
            ..ExecOptions::default()
        };
        let sources = member_inputs(model, info);
        let mut data = Vec::new();
        for batch in batches {
            let f = forward(model, batch, &opts)?;
            for s in &sources {
                data.extend_from_slice(f.value(s).unwrap().data());
            }
        }
        let t = policy
            .activations
            .calibrate(&Tensor64::from_vec(data), info.bits, info.signed)?;
        set(model, name, info, policy.activations.to_string(), t);
        done.insert(name.clone());
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::ModelBuilder;
    use crate::quantize::{insert_quant_layers, PrecisionConfig};
    use tqt_core::calib::CalibMethod;
    use tqt_core::quant::quantize_forward;
    use tqt_core::{Padding, Rng};

    #[test]
    fn weights_by_max_activations_in_order() {
        let mut b = ModelBuilder::new();
        b.input("x");
        let w = Tensor64::new(vec![1, 1, 1, 2], vec![0.75, -3.0]).unwrap();
        b.conv2d("c", "x", w, 1, Padding::Same);
        b.op("r", Op::Relu, &["c"]);
        b.output("r");
        let mut m = b.build().unwrap();
        insert_quant_layers(&mut m, PrecisionConfig::INT8).unwrap();
        let mut rng = Rng::new(1);
        let batches = vec![vec![rng.normal_tensor(&[8, 4, 4, 1], 1.0)]];
        let policy = InitPolicy {
            weights: CalibMethod::Max,
            activations: CalibMethod::Max,
        };
        let rec = calibrate(&mut m, &batches, policy).unwrap();
        let names: Vec<&str> = rec.iter().map(|r| r.tensor.as_str()).collect();
        assert_eq!(names, ["c/w/q", "x/q", "c/acc", "r/q"]);
        assert_eq!(m.thresholds["c/w/q"], 3.0f64.log2());

        // With MAX everywhere the accumulator threshold is max |x_q · w_q|
        // where x_q uses the already-calibrated input quantizer.
        let xq = m.quantizer("x/q").unwrap();
        let wq = m.quantizer("c/w/q").unwrap();
        let x = &batches[0][0];
        let expect = x
            .data()
            .iter()
            .flat_map(|&v| {
                let xv = quantize_forward(&Tensor64::scalar(v), &xq).item();
                [0.75, -3.0].map(|w| (xv * quantize_forward(&Tensor64::scalar(w), &wq).item()).abs())
            })
            .fold(0.0, f64::max);
        assert_eq!(rec[2].threshold, expect);
    }

    #[test]
    fn activations_without_data_fail() {
        let mut b = ModelBuilder::new();
        b.input("x");
        b.output("x");
        let mut m = b.build().unwrap();
        insert_quant_layers(&mut m, PrecisionConfig::INT8).unwrap();
        let policy = tqt_core::calib::init_thresholds(tqt_core::calib::Mode::Static);
        assert!(calibrate(&mut m, &[], policy).is_err());
    }
}
