//! The jump operator has Fourier symbol `-|ξ|^α`, so for the SE profile
//! `κ(t) = s² exp(-t²/2ℓ²)`
//!
//! `Z(δ)  = -(s²ℓ/√(2π)) ∫ |ξ|^α e^{-ℓ²ξ²/2} cos(ξδ) dξ`,
//! `Z'(δ) =  (s²ℓ/√(2π)) ∫ |ξ|^α ξ e^{-ℓ²ξ²/2} sin(ξδ) dξ`.
//!
//! These integrands are smooth, so a plain Simpson rule (after ξ = t²) gives
//! an oracle that shares nothing with the singular quadrature.

use levy_drift::kernel::KernelParams;
use levy_drift::singular_quadrature::{JumpKernelTable, JumpRule, QuadConfig};

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn fourier_z(k: &KernelParams, alpha: f64, delta: f64) -> (f64, f64) {
    let l = k.lengthscale;
    let pref = k.variance * l / (2.0 * std::f64::consts::PI).sqrt();
    let t_max = (40.0 / l).sqrt();
    let h = (1e-3f64).min(0.05 / (2.0 * t_max * delta.abs().max(1.0)));
    let n = (t_max / h).ceil() as usize;
    // ξ = t², dξ = 2t dt, integrate over ξ > 0 and double
    let z = simpson(
        |t| {
            let xi = t * t;
            2.0 * t * xi.powf(alpha) * (-0.5 * l * l * xi * xi).exp() * (xi * delta).cos()
        },
        0.0,
        t_max,
        n,
    );
    let dz = simpson(
        |t| {
            let xi = t * t;
            2.0 * t * xi.powf(alpha + 1.0) * (-0.5 * l * l * xi * xi).exp() * (xi * delta).sin()
        },
        0.0,
        t_max,
        n,
    );
    (-2.0 * pref * z, 2.0 * pref * dz)
}

#[test]
fn fourier_oracle_reproduces_frozen_values() {
    // 30-digit values of the same Fourier integrals
    let k = KernelParams::new(0.7, 1.3).unwrap();
    let (z, dz) = fourier_z(&k, 1.0, 0.4);
    assert!((z + 1.047_316_530_636_751_8).abs() < 1e-9, "{z}");
    assert!((dz - 1.941_124_975_614_690_7).abs() < 1e-9, "{dz}");
    let (z, dz) = fourier_z(&k, 1.5, 0.4);
    assert!((z + 1.218_823_932_712_189_2).abs() < 1e-9);
    assert!((dz - 3.036_746_661_949_747_4).abs() < 1e-9);
}

#[test]
fn quadrature_matches_fourier_route() {
    let spread = 6.0;
    for (l, s2) in [(0.7, 1.3), (0.3, 1.0), (1.5, 0.5)] {
        let k = KernelParams::new(l, s2).unwrap();
        let cfg = QuadConfig::for_kernel(l, spread);
        for alpha in [1.0, 1.25, 1.5, 1.75] {
            let rule = JumpRule::new(alpha, &cfg).unwrap();
            for delta in [0.0, 0.4, -1.1, 3.0, spread] {
                let mut out = [0.0; 2];
                rule.se_sections(&k, delta, 0, &mut out).unwrap();
                let (z, dz) = fourier_z(&k, alpha, delta);
                let scale = z.abs().max(1e-3);
                assert!(
                    (out[0] - z).abs() < 1e-9 * scale,
                    "z l={l} a={alpha} d={delta}: {} vs {z}",
                    out[0]
                );
                assert!(
                    (out[1] - dz).abs() < 1e-9 * dz.abs().max(1e-3),
                    "dz l={l} a={alpha} d={delta}: {} vs {dz}",
                    out[1]
                );
            }
        }
    }
}

#[test]
fn second_jump_matches_squared_symbol() {
    // (s²ℓ/√(2π)) ∫ |ξ|^{2α} e^{-ℓ²ξ²/2} cos(ξδ) dξ at ℓ = 0.7, s² = 1.3,
    // evaluated to 30 digits
    let frozen = [
        (1.0, 0.0, 2.653_061_224_489_795_8),
        (1.0, 0.4, 1.517_609_060_007_521_8),
        (1.0, 2.0, -0.320_795_132_740_226_4),
        (1.25, 0.0, 3.910_712_318_577_457),
        (1.25, 0.4, 1.984_613_123_232_847_4),
        (1.25, 2.0, -0.194_876_416_317_939_5),
        (1.5, 0.0, 6.048_104_542_529_009),
        (1.5, 0.4, 2.690_169_532_709_443_3),
        (1.5, 2.0, 0.113_297_654_392_966_09),
    ];
    let k = KernelParams::new(0.7, 1.3).unwrap();
    let cfg = QuadConfig::for_kernel(0.7, 4.0);
    for alpha in [1.0, 1.25, 1.5] {
        let rule = JumpRule::new(alpha, &cfg).unwrap();
        let table = JumpKernelTable::new(&k, &rule, 12.0, 60.0).unwrap();
        for &(a, delta, want) in frozen.iter().filter(|f| f.0 == alpha) {
            let direct = table.second_jump(delta).unwrap();
            let interp = table.second_jump_interp(delta).unwrap();
            assert!(
                (direct - want).abs() < 1e-7 * want.abs().max(1.0),
                "a={a} d={delta}: {direct} vs {want}"
            );
            assert!(
                (interp - want).abs() < 1e-7 * want.abs().max(1.0),
                "a={a} d={delta}: {interp} vs {want}"
            );
        }
    }
}
