use cvpose_core::tensor::gradcheck;
fn main() {
    let t0 = std::time::Instant::now();
    let reports = gradcheck::run_suite(100, 1e-3, 42).unwrap();
    let mut ok = true;
    for r in &reports {
        let pass = r.max_rel_error < 1e-4;
        ok &= pass;
        println!("{:<32} {:>12.3e}  {}", r.name, r.max_rel_error, if pass { "pass" } else { "FAIL" });
    }
    println!("total {:?}, all pass: {}", t0.elapsed(), ok);
}
