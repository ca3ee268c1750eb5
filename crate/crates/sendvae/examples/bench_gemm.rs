use ndarray::Array2;
use std::time::Instant;

fn main() {
    sendvae::init_threads();
    for &(m, k, n) in &[(1024usize, 96usize, 96usize), (1024, 96, 384), (2048, 256, 256), (512, 512, 512)] {
        let a = Array2::<f32>::from_elem((m, k), 1.1f32);
        let b = Array2::<f32>::from_elem((k, n), 0.9f32);
        let t0 = Instant::now();
        let mut iters = 0u32;
        let mut sink = 0f32;
        while t0.elapsed().as_secs_f64() < 1.0 {
            let c = sendvae::graph::kernels::gemm(a.view(), b.view());
            sink += c[[0, 0]];
            iters += 1;
        }
        let secs = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * iters as f64) / secs / 1e9;
        println!("{m}x{k}x{n}: {gflops:.2} GFLOP/s ({iters} iters, sink {sink:.1})");
    }
}
