use innerctl_core::nn::kernels::*;
use std::time::Instant;

fn main() {
    let (m, k, n) = (30usize, 128, 384);
    let iters = 2000;

    // C[m,n] += A[m,k] B[k,n]
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let mut c = vec![0f32; m * n];
    let t0 = Instant::now();
    for _ in 0..iters { matmul_acc(&mut c, &a, &b, m, k, n); }
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul_acc : {:.2} GFLOP/s", (2.0 * (m*k*n*iters) as f64) / dt / 1e9);

    // C[m,k] += A[m,n] B[k,n]^T
    let a2 = vec![0.5f32; m * n];
    let b2 = vec![0.25f32; k * n];
    let mut c2 = vec![0f32; m * k];
    let t0 = Instant::now();
    for _ in 0..iters { matmul_a_bt_acc(&mut c2, &a2, &b2, m, n, k); }
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul_a_bt: {:.2} GFLOP/s", (2.0 * (m*k*n*iters) as f64) / dt / 1e9);

    // C[k,n] += A[m,k]^T B[m,n]
    let a3 = vec![0.5f32; m * k];
    let b3 = vec![0.25f32; m * n];
    let mut c3 = vec![0f32; k * n];
    let t0 = Instant::now();
    for _ in 0..iters { matmul_at_b_acc(&mut c3, &a3, &b3, m, k, n); }
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul_at_b: {:.2} GFLOP/s", (2.0 * (m*k*n*iters) as f64) / dt / 1e9);
}
