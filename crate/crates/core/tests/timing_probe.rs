use freqshield::models::{build_simple_cnn, build_unet_autoencoder, CnnConfig, AutoencoderConfig};
use freqshield::numerics::{RngStream, Tape, Tensor, Reduction};
use std::time::Instant;

#[test]
fn timing_probe() {
    let model = build_simple_cnn(CnnConfig::default()).unwrap();
    let mut stream = RngStream::seed(0);
    let b = 32;
    let data: Vec<f32> = (0..b*64*64).map(|_| stream.uniform(0.0, 1.0)).collect();
    let x = Tensor::from_vec(&[b,1,64,64], data).unwrap().with_requires_grad();
    let labels: Vec<usize> = (0..b).map(|i| i % 4).collect();

    let t0 = Instant::now();
    let iters = 5;
    for _ in 0..iters {
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let params = model.net.register_params(&mut tape, true);
        let logits = model.net.forward_with(&mut tape, &params, xid).unwrap();
        let loss = tape.cross_entropy(logits, &labels, Reduction::Mean).unwrap();
        tape.backward(loss).unwrap();
    }
    let per_step = t0.elapsed().as_secs_f64() / iters as f64;
    println!("CNN train step (B=32): {:.3}s  -> 30 epochs x 20 batches = {:.1}s", per_step, per_step*600.0);

    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let params = model.net.register_params(&mut tape, false);
        let logits = model.net.forward_with(&mut tape, &params, xid).unwrap();
        let loss = tape.cross_entropy(logits, &labels, Reduction::Sum).unwrap();
        tape.backward(loss).unwrap();
    }
    let per_step = t0.elapsed().as_secs_f64() / iters as f64;
    println!("CNN attack step (B=32, input grad only): {:.3}s", per_step);

    let ae = build_unet_autoencoder(AutoencoderConfig::default()).unwrap();
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let enc = ae.encoder.register_params(&mut tape, true);
        let dec = ae.decoder.register_params(&mut tape, true);
        let z = ae.encoder.forward_with(&mut tape, &enc, xid).unwrap();
        let out = ae.decoder.forward_with(&mut tape, &dec, z).unwrap();
        let l = freqshield::losses::mse_loss(&mut tape, out, xid).unwrap();
        tape.backward(l).unwrap();
    }
    let per_step = t0.elapsed().as_secs_f64() / iters as f64;
    println!("AE train step (B=32): {:.3}s -> 15 epochs x 15 batches = {:.1}s", per_step, per_step*225.0);
}
