fn main() {
    let t = std::time::Instant::now();
    let m = 4096usize; let k = 216; let n = 128;
    let a = vec![1.0f32; m * k];
    let b = vec![1.0f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let reps = 50;
    for _ in 0..reps {
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                0.0, c.as_mut_ptr(), n as isize, 1);
        }
    }
    let el = t.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * reps) as f64;
    println!("sgemm {:.1} ms/rep, {:.2} GFLOP/s, c[0]={}", el * 1000.0 / reps as f64, flops / el / 1e9, c[0]);
}
