use std::ffi::CStr;
use std::process::Command;
use std::ptr;

use srkit_ffi::*;

#[test]
fn nearest_and_grid() {
    assert_eq!(srkit_round_nearest(1.0), 0x3F80);
    assert_eq!(srkit_round_nearest(f32::from_bits(0x3F80_8000)), 0x3F80);
    assert_eq!(srkit_round_nearest(f32::from_bits(0x3F81_8000)), 0x3F82);
    assert_eq!(srkit_bf16_to_f32(0x3F81), 1.0078125);
    assert_eq!(srkit_sr_up_probability(1.001953125), 0.25);
    assert!(srkit_sr_up_probability(f32::NAN).is_nan());

    let mut g = SrkitQuantGrid::default();
    assert_eq!(unsafe { srkit_quant_grid(1.001953125, &mut g) }, SrkitStatus::Ok);
    assert_eq!((g.floor, g.ceil, g.resolution), (1.0, 1.0078125, 0.0078125));
    let before = g;
    assert_eq!(unsafe { srkit_quant_grid(f32::INFINITY, &mut g) }, SrkitStatus::NonFinite);
    assert_eq!(g, before);
    assert_eq!(unsafe { srkit_quant_grid(1.0, ptr::null_mut()) }, SrkitStatus::NullPointer);
}

#[test]
fn stochastic_rounding_through_handle() {
    let rng = srkit_rng_new(7);
    let n = 40_000u64;
    let mut up = 0;
    for k in 0..n {
        let mut b = 0u16;
        assert_eq!(unsafe { srkit_round_stochastic(rng, 1.001953125, 3, 0, k, &mut b) }, SrkitStatus::Ok);
        assert!(b == 0x3F80 || b == 0x3F81);
        up += (b == 0x3F81) as u64;
    }
    let p = up as f64 / n as f64;
    let sd = (0.25f64 * 0.75 / n as f64).sqrt();
    assert!((p - 0.25).abs() < 4.0 * sd, "{p}");

    let a = unsafe { srkit_draw_u16(rng, 1, 2, 3) };
    assert_eq!(a, unsafe { srkit_draw_u16(rng, 1, 2, 3) });
    let mut b = 0u16;
    assert_eq!(unsafe { srkit_round_stochastic(rng, f32::NAN, 0, 0, 0, &mut b) }, SrkitStatus::NonFinite);
    assert_eq!(unsafe { srkit_round_stochastic(ptr::null(), 1.0, 0, 0, 0, &mut b) }, SrkitStatus::NullPointer);
    assert_eq!(unsafe { srkit_draw_u16(ptr::null(), 1, 2, 3) }, 0);
    unsafe { srkit_rng_free(rng) };
    unsafe { srkit_rng_free(ptr::null_mut()) };
}

fn cfg(lr: f64) -> SrkitAdamWConfig {
    SrkitAdamWConfig {
        lr,
        beta1: 0.9,
        beta2: 0.95,
        eps: 1e-8,
        weight_decay: 0.0,
        eps_inside_root: false,
    }
}

#[test]
fn optimizer_lifecycle() {
    let lens = [3usize, 2];
    let mut opt = ptr::null_mut();
    let s = unsafe { srkit_optimizer_new(&cfg(1e-2), SrkitPolicy::Bf16Sr, 1, lens.as_ptr(), 2, &mut opt) };
    assert_eq!(s, SrkitStatus::Ok);
    let mut a = [1.0f32, -2.0, 0.5];
    let mut b = [3.0f32, 4.0];
    let ga = [0.5f32, -0.5, 1.0];
    let gb = [1.0f32, 1.0];
    for _ in 0..20 {
        let ps = [a.as_mut_ptr(), b.as_mut_ptr()];
        let gs = [ga.as_ptr(), gb.as_ptr()];
        assert_eq!(unsafe { srkit_optimizer_step(opt, ps.as_ptr(), gs.as_ptr()) }, SrkitStatus::Ok);
    }
    assert_eq!(unsafe { srkit_optimizer_steps(opt) }, 20);
    assert!(a[0] < 1.0 && a[1] > -2.0 && b[0] < 3.0);
    for v in a.iter().chain(&b) {
        assert_eq!(v.to_bits() & 0xFFFF, 0, "weights stay on the bf16 grid");
    }

    // a bad gradient leaves everything untouched
    let (a0, b0) = (a, b);
    let bad = [f32::NAN, 0.0];
    let ps = [a.as_mut_ptr(), b.as_mut_ptr()];
    let gs = [ga.as_ptr(), bad.as_ptr()];
    assert_eq!(unsafe { srkit_optimizer_step(opt, ps.as_ptr(), gs.as_ptr()) }, SrkitStatus::NonFinite);
    assert_eq!((a, b), (a0, b0));
    assert_eq!(unsafe { srkit_optimizer_steps(opt) }, 20);

    assert_eq!(unsafe { srkit_optimizer_step(ptr::null_mut(), ps.as_ptr(), gs.as_ptr()) }, SrkitStatus::NullPointer);
    unsafe { srkit_optimizer_free(opt) };
}

#[test]
fn optimizer_rejects_bad_config() {
    let mut opt = ptr::null_mut();
    let lens = [1usize];
    let s = unsafe { srkit_optimizer_new(&cfg(-1.0), SrkitPolicy::Fp32Master, 0, lens.as_ptr(), 1, &mut opt) };
    assert_eq!(s, SrkitStatus::InvalidConfig);
    assert!(opt.is_null());
    let s = unsafe { srkit_optimizer_new(ptr::null(), SrkitPolicy::Fp32Master, 0, lens.as_ptr(), 1, &mut opt) };
    assert_eq!(s, SrkitStatus::NullPointer);
}

#[test]
fn status_messages_are_c_strings() {
    for s in [SrkitStatus::Ok, SrkitStatus::NonFinite, SrkitStatus::Internal] {
        let m = unsafe { CStr::from_ptr(srkit_status_message(s)) };
        assert!(!m.to_bytes().is_empty());
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let header = format!("{dir}/include/srkit.h");
    let src = std::env::temp_dir().join("srkit_header_check.c");
    std::fs::write(
        &src,
        "#include \"srkit.h\"\nint main(void) { SrkitQuantGrid g; return srkit_quant_grid(1.0f, &g) != SRKIT_STATUS_OK; }\n",
    )
    .unwrap();
    assert!(std::path::Path::new(&header).exists());
    match Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-I"]).arg(format!("{dir}/include")).arg(&src).status() {
        Ok(st) => assert!(st.success()),
        Err(_) => eprintln!("no C compiler; header syntax not checked"),
    }
}
