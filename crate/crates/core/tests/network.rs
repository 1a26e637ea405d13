mod common;

use bcmf::lmfm::{lmfm_forward, Lmfm};
use bcmf::ops::BnMode;
use bcmf::{BclConfig, Connection, LmfmConfig, NetConfig, Network, ParamStore, Tape, Tensor};
use common::Gen;

fn small() -> NetConfig {
    let mut cfg = NetConfig::new(3);
    cfg.stem_channels = 4;
    cfg.high_channels = 4;
    cfg.low_channels = 8;
    cfg.head_channels = 4;
    cfg.lmfm = LmfmConfig::new(8, 4);
    cfg
}

#[test]
fn eval_logits_do_not_mix_samples() {
    let mut g = Gen::new(1);
    let mut net = Network::build(small(), 5).unwrap();
    net.calibrate_bn(&g.tensor(&[2, 3, 64, 64])).unwrap();
    let a = g.tensor(&[1, 3, 64, 64]);
    let b = g.tensor(&[1, 3, 64, 64]);
    let pair = Tensor::new([2, 3, 64, 64], a.data().iter().chain(a.data()).copied().collect()).unwrap();
    let mixed = Tensor::new([2, 3, 64, 64], a.data().iter().chain(b.data()).copied().collect()).unwrap();
    let single = net.logits(&a, BnMode::Eval).unwrap();
    let pair = net.logits(&pair, BnMode::Eval).unwrap();
    let mixed = net.logits(&mixed, BnMode::Eval).unwrap();
    let half = single.numel();
    assert_eq!(&pair.data()[..half], &pair.data()[half..]);
    assert_eq!(&pair.data()[..half], single.data());
    assert_eq!(&mixed.data()[..half], single.data());
}

#[test]
fn forward_is_deterministic() {
    let mut g = Gen::new(2);
    let net = Network::build(small(), 9).unwrap();
    let x = g.tensor(&[2, 3, 64, 64]);
    assert_eq!(net.logits(&x, BnMode::Train).unwrap(), net.logits(&x, BnMode::Train).unwrap());
}

#[test]
fn every_parameter_receives_gradient() {
    let (mut dead, mut total) = (0, 0);
    for seed in 0..10 {
        let mut g = Gen::new(100 + seed);
        let net = Network::build(small(), seed).unwrap();
        let x = g.tensor(&[2, 3, 64, 64]);
        let gt: Vec<_> = (0..2).map(|_| g.labels(64, 64, 3, 0.0)).collect();
        let mut tape = Tape::new();
        let (logits, bind) = net.run(&mut tape, &x, BnMode::Train, true).unwrap();
        let loss = tape.total_loss(logits, &gt, &BclConfig::default()).unwrap();
        tape.backward(loss.total).unwrap();
        for (_, grad) in bind.gradients(&tape, &net.params) {
            total += 1;
            dead += grad.iter().all(|v| *v == 0.0) as usize;
        }
    }
    assert!(total > 0);
    assert!((dead as f64) < 0.05 * total as f64, "{dead} of {total} parameters without gradient");
}

fn lmfm_store(cfg: &LmfmConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    Lmfm::new(cfg.clone(), "").unwrap().init(&mut store, seed).unwrap();
    store
}

#[test]
fn lmfm_keeps_spatial_shape() {
    let mut g = Gen::new(3);
    for connection in [Connection::None, Connection::Cascade, Connection::Interval] {
        let cfg = LmfmConfig { connection, ..LmfmConfig::new(6, 5) };
        let store = lmfm_store(&cfg, 1);
        for (h, w) in [(4, 4), (8, 12), (16, 8), (20, 24)] {
            let y = lmfm_forward(&g.tensor(&[2, 6, h, w]), &cfg, &store, BnMode::Train).unwrap();
            assert_eq!(y.shape(), [2, 5, h, w]);
        }
    }
}

#[test]
fn lmfm_commutes_with_grid_aligned_shifts() {
    let mut g = Gen::new(4);
    let (c, size, patch, shift) = (4, 64, 12, 4);
    for connection in [Connection::Cascade, Connection::Interval] {
        let cfg = LmfmConfig { connection, ..LmfmConfig::new(c, 3) };
        let store = lmfm_store(&cfg, 2);
        let content: Vec<f64> = (0..c * patch * patch).map(|_| g.uniform(-1.0, 1.0)).collect();
        let place = |oy: usize, ox: usize| {
            let mut d = vec![0.25; c * size * size];
            for ch in 0..c {
                for y in 0..patch {
                    for x in 0..patch {
                        d[(ch * size + oy + y) * size + ox + x] = content[(ch * patch + y) * patch + x];
                    }
                }
            }
            Tensor::new([1, c, size, size], d).unwrap()
        };
        let a = lmfm_forward(&place(24, 24), &cfg, &store, BnMode::Train).unwrap();
        let b = lmfm_forward(&place(24 + shift, 24 - shift), &cfg, &store, BnMode::Train).unwrap();
        let margin = 16;
        for ch in 0..3 {
            for y in margin..size - margin - shift {
                for x in margin + shift..size - margin {
                    let va = a.data()[(ch * size + y) * size + x];
                    let vb = b.data()[(ch * size + y + shift) * size + x - shift];
                    assert!((va - vb).abs() <= 1e-9, "{connection:?} ({y},{x}): {va} vs {vb}");
                }
            }
        }
    }
}

#[test]
fn eval_block_is_piecewise_affine() {
    // second difference along a tiny step, no ReLU changes sign
    let mut g = Gen::new(5);
    let cfg = LmfmConfig { connection: Connection::None, ..LmfmConfig::new(4, 3) };
    let mut store = lmfm_store(&cfg, 3);
    let x = g.tensor(&[2, 4, 8, 8]);
    let mut tape = Tape::new();
    let block = Lmfm::new(cfg.clone(), "").unwrap();
    let mut ctx = bcmf::params::Ctx::new(&mut tape, &store, BnMode::Train, true);
    let xv = ctx.tape.constant(x.clone());
    block.forward(&mut ctx, xv).unwrap();
    let stats = ctx.finish();
    store.apply_bn_stats(&stats.stats).unwrap();
    let f = |t: &Tensor| lmfm_forward(t, &cfg, &store, BnMode::Eval).unwrap();
    let d = g.tensor(&[2, 4, 8, 8]);
    let step = |k: f64| Tensor::new([2, 4, 8, 8], x.data().iter().zip(d.data()).map(|(a, b)| a + k * 1e-7 * b).collect()).unwrap();
    let (y0, y1, y2) = (f(&x), f(&step(1.0)), f(&step(2.0)));
    for i in 0..y0.numel() {
        let second = y2.data()[i] - 2.0 * y1.data()[i] + y0.data()[i];
        assert!(second.abs() <= 1e-12, "{i}: {second}");
    }
}
