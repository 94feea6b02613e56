//! Core pieces used together through the public API: calibration feeding a
//! quantizer, threshold training on the tape, precision genericity and
//! tensor files.

use tqt_core::calib::{calib_klj, calib_max, Histogram};
use tqt_core::io::{read_tensor, write_tensor};
use tqt_core::optim::AdamState;
use tqt_core::quant::{quantize_forward, quantize_fused};
use tqt_core::{IntTensor, QuantizerParams, Quantizer64, Rng, Tape64, Tensor, Tensor32, Tensor64};

fn l2(x: &Tensor64, q: &Quantizer64) -> f64 {
    let y = quantize_forward(x, q);
    y.sub(x).unwrap().data().iter().map(|d| d * d).sum::<f64>() / x.len() as f64
}

#[test]
fn klj_threshold_beats_max_on_a_heavy_tail() {
    let mut rng = Rng::new(3);
    // Laplace-like tail: a product of a normal and an exponential draw.
    let data: Vec<f64> = (0..50_000)
        .map(|_| rng.normal() * -(1.0 - rng.uniform()).ln())
        .collect();
    let x = Tensor64::from_vec(data);
    let t_max = calib_max(&x).unwrap();
    let t_kl = calib_klj(&Histogram::from_data(x.data(), 2048).unwrap(), 4, true).unwrap();
    assert!(t_kl < t_max);
    let q_max = Quantizer64::from_threshold(4, true, t_max).unwrap();
    let q_kl = Quantizer64::from_threshold(4, true, t_kl).unwrap();
    assert!(l2(&x, &q_kl) < l2(&x, &q_max));
}

#[test]
fn tape_training_moves_an_oversized_threshold_down() {
    let mut rng = Rng::new(8);
    let mut log2_t = 6.0;
    let mut adam = AdamState::with_defaults(1, 0.05);
    let first = rng.normal_tensor(&[2000], 1.0);
    let before = l2(&first, &Quantizer64::new(4, true, log2_t).unwrap());
    for _ in 0..400 {
        let x: Tensor64 = rng.normal_tensor(&[2000], 1.0);
        let mut tape = Tape64::new();
        let xv = tape.constant(x.clone());
        let lv = tape.param(Tensor64::scalar(log2_t));
        let y = quantize_fused(&mut tape, xv, lv, 4, true).unwrap();
        let diff = tape.sub(y, xv).unwrap();
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let g = tape.backward(loss).unwrap().get(lv).unwrap().item();
        log2_t += adam.step(&[g]).unwrap()[0];
    }
    let after = l2(&first, &Quantizer64::new(4, true, log2_t).unwrap());
    assert!(log2_t < 3.0, "log2 t stayed at {log2_t}");
    assert!(after < 0.25 * before, "{after} vs {before}");
}

#[test]
fn single_and_double_precision_share_the_grid() {
    let mut rng = Rng::new(5);
    let x32: Tensor32 = rng.normal_tensor(&[512], 3.0);
    let x64: Tensor64 = x32.cast();
    for (bits, signed, l) in [(8, true, 1.3), (4, false, 0.2), (3, true, -2.7)] {
        let q32 = QuantizerParams::<f32>::new(bits, signed, l as f32).unwrap();
        let q64 = Quantizer64::new(bits, signed, l).unwrap();
        assert_eq!(q32.scale().1, q64.scale().1);
        let y32: Tensor64 = quantize_forward(&x32, &q32).cast();
        assert_eq!(y32, quantize_forward(&x64, &q64));
    }
}

#[test]
fn tensor_files_keep_dtype_and_shape() {
    let dir = tempfile::tempdir().unwrap();
    let f = Tensor::new(vec![2, 3], vec![0.5f32, -1.0, 2.25, 0.0, 7.0, -3.5]).unwrap();
    let i: IntTensor = Tensor::new(vec![3, 1], vec![-7, 0, i32::MAX]).unwrap();
    write_tensor(dir.path().join("f.tqt"), &f).unwrap();
    write_tensor(dir.path().join("i.tqt"), &i).unwrap();
    assert_eq!(read_tensor::<f32>(dir.path().join("f.tqt")).unwrap(), f);
    assert_eq!(read_tensor::<i32>(dir.path().join("i.tqt")).unwrap(), i);
    assert!(read_tensor::<f64>(dir.path().join("f.tqt")).is_err());
}
