use diffcore::{clip_grad_norm, cosine_lr, Activation, AdamState, Array, Checkpoint, Mlp, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn regression_loss(net: &Mlp, x: &Array, y: &Array) -> (f64, Vec<Array>) {
    let mut tape = Tape::new();
    let xin = tape.constant(x.clone());
    let (out, vars) = net.forward_tape(&mut tape, xin).unwrap();
    let target = tape.constant(y.clone());
    let err = tape.sub(out, target);
    let sq = tape.square(err);
    let loss = tape.mean(sq);
    let value = tape.value(loss).item();
    let mut g = tape.backward(loss).unwrap();
    (value, vars.params.iter().map(|&v| g.take(v)).collect())
}

#[test]
fn adam_fits_a_smooth_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 128;
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x = Array::matrix(n, 1, xs.clone());
    let y = Array::matrix(n, 1, xs.iter().map(|v| v.sin()).collect());
    let mut net = Mlp::new(&[1, 32, 32, 1], Activation::Silu, 1.0, &mut rng);
    let mut opt = AdamState::new(net.params());
    let (first, _) = regression_loss(&net, &x, &y);
    let iters = 1500;
    for it in 0..iters {
        let (_, mut grads) = regression_loss(&net, &x, &y);
        clip_grad_norm(&mut grads, 1.0);
        let lr = cosine_lr(1e-2, it as f64 / iters as f64).unwrap();
        opt.step(&mut net.params_mut(), &grads, lr).unwrap();
    }
    let (last, _) = regression_loss(&net, &x, &y);
    assert!(last < 1e-3 && last < first / 100.0, "loss {first} -> {last}");
}

#[test]
fn checkpoint_file_restores_a_network_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Mlp::new(&[3, 7, 2], Activation::Tanh, 0.5, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let mut ck = Checkpoint::new(serde_json::json!({"widths": net.widths()}));
    ck.push_all("net", net.params());
    ck.save(&path).unwrap();

    let back = Checkpoint::load(&path).unwrap();
    let mut other = Mlp::new(&[3, 7, 2], Activation::Tanh, 0.5, &mut rng);
    for (dst, src) in other.params_mut().into_iter().zip(back.get_all("net")) {
        *dst = src.clone();
    }
    let x = Array::matrix(4, 3, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect());
    assert_eq!(net.forward(&x).unwrap(), other.forward(&x).unwrap());
    assert_eq!(back.meta["widths"], serde_json::json!([3, 7, 2]));
}
