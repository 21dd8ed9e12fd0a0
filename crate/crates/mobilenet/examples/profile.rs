//! Prints parameter counts, MACs and forward/backward timings per backbone.
use std::time::Instant;

use leaffew_mobilenet::{softmax_cross_entropy, Architecture, Backbone, Tensor};

fn main() {
    let res: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(224);
    let batch: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    for arch in Architecture::ALL {
        let mut net = Backbone::new(arch, 1000, 0);
        let p = net.profile(res);
        let x = Tensor::from_vec([batch, 3, res, res], (0..batch * 3 * res * res).map(|i| ((i % 255) as f32) / 255.0).collect());
        let t = Instant::now();
        net.embed(&x);
        let fwd = t.elapsed().as_secs_f64() / batch as f64;
        let t = Instant::now();
        let pooled = net.forward_features(&x, true);
        let logits = net.forward_logits(&pooled, true);
        let (_, g, _) = softmax_cross_entropy(&logits, &vec![0; batch]);
        net.backward(&g);
        let step = t.elapsed().as_secs_f64() / batch as f64;
        println!(
            "{arch:<11} params {:>9} ({:.2} MB)  GMACs@{res} {:.4}  fwd {:.1} ms/img  train {:.1} ms/img",
            p.params,
            p.params as f64 * 4.0 / 1048576.0,
            p.macs as f64 / 1e9,
            fwd * 1e3,
            step * 1e3
        );
    }
}
