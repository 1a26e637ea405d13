mod common;

use bcmf::bcl::nms_filter;
use bcmf::ops::{avg_pool2d_forward, bilinear_upsample_forward, conv2d_forward, global_avg_pool_forward, softmax_channels_forward};
use bcmf::{BclConfig, Tape};
use common::Gen;

#[test]
fn conv2d_matches_direct_loops() {
    let mut g = Gen::new(11);
    let mut done = 0;
    while done < 150 {
        let (k, stride) = ([1, 3, 5][g.range(0, 2)], g.range(1, 3));
        let pad = g.range(0, k / 2);
        let (h, w) = (g.range(k.max(2), 10), g.range(k.max(2), 10));
        if (h + 2 * pad - k) % stride > pad || (w + 2 * pad - k) % stride > pad {
            continue;
        }
        let shape = [g.range(1, 2), g.range(1, 4), h, w];
        let x = g.tensor(&shape);
        let wshape = [g.range(1, 4), x.shape()[1], k, k];
        let wt = g.tensor(&wshape);
        let b = (g.unit() < 0.5).then(|| g.tensor(&[wt.shape()[0]]));
        let got = conv2d_forward(&x, &wt, b.as_ref(), stride, pad).unwrap();
        assert_eq!(got.data(), common::conv2d(&x, &wt, b.as_ref(), stride, pad), "k={k} s={stride} p={pad} {h}x{w}");
        done += 1;
    }
}

#[test]
fn pools_and_upsample_match_direct_loops() {
    let mut g = Gen::new(12);
    for _ in 0..150 {
        let k = g.range(1, 4);
        let (h, w) = (k * g.range(1, 4), k * g.range(1, 4));
        let shape = [g.range(1, 2), g.range(1, 4), h, w];
        let x = g.tensor(&shape);
        assert_eq!(avg_pool2d_forward(&x, k, k).unwrap().data(), common::avg_pool2d(&x, k, k));
        assert_eq!(global_avg_pool_forward(&x).unwrap().data(), common::global_avg_pool(&x));
        let (th, tw) = (h + g.range(0, 9), w + g.range(0, 9));
        assert_eq!(bilinear_upsample_forward(&x, (th, tw)).unwrap().data(), common::bilinear(&x, th, tw));
    }
}

#[test]
fn nms_matches_brute_force() {
    let mut g = Gen::new(13);
    for _ in 0..150 {
        let (h, w, k) = (g.range(1, 12), g.range(1, 12), [1, 3, 5, 7][g.range(0, 3)]);
        // coarse values so plateaus occur
        let map: Vec<f64> = (0..h * w).map(|_| g.range(0, 4) as f64).collect();
        assert_eq!(nms_filter(&map, h, w, k).unwrap(), common::nms(&map, h, w, k));
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Gen::new(14);
    for _ in 0..50 {
        let shape = [2, g.range(2, 6), 4, 5];
        let x = g.tensor(&shape);
        let p = softmax_channels_forward(&x).unwrap();
        let (m, plane) = (x.shape()[1], 20);
        for n in 0..2 {
            for i in 0..plane {
                let s: f64 = (0..m).map(|c| p.data()[(n * m + c) * plane + i]).sum();
                assert!((s - 1.0).abs() <= 1e-12);
                assert!((0..m).all(|c| (0.0..1.0).contains(&p.data()[(n * m + c) * plane + i])));
            }
        }
    }
}

#[test]
fn rebuilt_graphs_give_identical_gradients() {
    let grads = || {
        let mut g = Gen::new(15);
        let x = g.tensor(&[2, 3, 8, 8]);
        let w = g.tensor(&[4, 3, 3, 3]);
        let gt: Vec<_> = (0..2).map(|_| g.labels(8, 8, 4, 0.1)).collect();
        let mut t = Tape::new();
        let (xv, wv) = (t.param(x), t.param(w));
        let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = t.relu(y).unwrap();
        let loss = t.total_loss(y, &gt, &BclConfig::default()).unwrap();
        t.backward(loss.total).unwrap();
        (t.grad(xv).unwrap().to_vec(), t.grad(wv).unwrap().to_vec())
    };
    let (a, b) = (grads(), grads());
    assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.iter().any(|v| *v != 0.0));
}
