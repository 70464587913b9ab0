use ndarray::Array3;
use optishield::optics::*;
use std::time::Instant;

fn main() {
    let g = SensorGeometry::default();
    let kernel = init_kernel(&g, 1, InitScheme::MidpointNoise).unwrap();
    let images = Array3::from_shape_fn((64, 64, 64), |(n, r, c)| {
        ((n * 7 + r * 3 + c) % 37) as f32 / 37.0
    });
    // warmup
    let f = optical_forward_batch(&images, &kernel).unwrap();
    let t0 = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let _ = optical_forward_batch(&images, &kernel).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    let t1 = Instant::now();
    for _ in 0..reps {
        let _ = optical_backward_kernel(&images, &f, &kernel).unwrap();
    }
    let bwd = t1.elapsed().as_secs_f64() / reps as f64;
    let macs = 64.0 * 32.0 * 32.0 * 100.0 * 100.0;
    println!("forward batch64: {:.1} ms  ({:.2} GMAC/s)", fwd * 1e3, macs / fwd / 1e9);
    println!("backward batch64: {:.1} ms ({:.2} GMAC/s)", bwd * 1e3, macs / bwd / 1e9);
}
