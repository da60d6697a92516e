use num_complex::Complex64 as C64;
use sbs_sim::analysis::GdmPipeline;
use sbs_sim::evolve::NoiseModel;
use sbs_sim::hamiltonian::NoiseDrive;
use sbs_sim::protocols::ProtocolConfig;
use sbs_sim::qstate::HilbertSpec;
use std::f64::consts::PI;
use std::time::Instant;

fn main() {
    let space = HilbertSpec::default_two_mode();
    let mut noise = NoiseModel::ideal(2);
    noise.nbar_init = vec![0.03, 0.03];
    noise.heat_rates = vec![6.1, 39.0];
    noise.noise_60hz = Some(NoiseDrive::mains_60hz(2.0 * PI * 150.0, 0.0).unwrap());
    let mut cfg = ProtocolConfig::default();
    cfg.omega = (PI / 550.0e-6) / (0.1 * 0.087);
    cfg.lindblad_rtol = 3e-7;
    let axis: Vec<f64> = (0..11).map(|k| -2.0 + 0.4 * k as f64).collect();
    let points: Vec<(C64, C64)> = axis
        .iter()
        .flat_map(|&x1| {
            axis.iter()
                .map(move |&x2| (C64::new(0.0, x1), C64::new(0.0, x2)))
        })
        .collect();

    let t0 = Instant::now();
    let mut pipe = GdmPipeline::new(&space, &noise, &cfg, 1.2).unwrap();
    println!("G sims (8 phases): {:.1} s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let _g = pipe.wigner_g(&points).unwrap();
    println!("wigner_g: {:.1} s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let _gd = pipe.wigner_gd(&points, true, true).unwrap();
    println!("wigner_gd: {:.1} s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let _gdm = pipe.wigner_gdm(&points).unwrap();
    println!("wigner_gdm (incl O_M build): {:.1} s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let _gdm2 = pipe.wigner_gdm(&points).unwrap();
    println!("wigner_gdm (cached O_M): {:.1} s", t0.elapsed().as_secs_f64());
}
