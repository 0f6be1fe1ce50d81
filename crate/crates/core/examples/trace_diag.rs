use tcvio::estimator::{Estimator, FrameInput};
use tcvio::pipeline::{bootstrap, dataset_from_sim, estimator_config, RunOptions};
use tcvio::sim::{NoiseSpec, SimScenario, Simulator};
use tcvio::preintegration::ImuNoise;

fn main() {
    let scn = SimScenario::default_sinusoid3d(
        60.0, 0.020,
        {
            let mut n = NoiseSpec { imu: ImuNoise::default(), pixel_sigma: 1.0, seed: 1 };
            let mode = std::env::args().nth(1).unwrap_or_default();
            if mode == "pixel_only" { n.imu = ImuNoise { accel_noise_density: 0.0, gyro_noise_density: 0.0, accel_random_walk: 0.0, gyro_random_walk: 0.0 }; }
            if mode == "imu_only" { n.pixel_sigma = 0.0; }
            n
        },
    );
    let sim = Simulator::new(scn).unwrap();
    let ds = dataset_from_sim(&sim).unwrap();
    let opt = RunOptions::default();
    let cfg = estimator_config(&ds, &opt);
    let mut est = Estimator::new(cfg, bootstrap(&ds, ds.frames[0].t_image));
    let mut imu = ds.imu.iter().peekable();
    for f in &ds.frames {
        while let Some(s) = imu.peek() {
            if s.t > f.t_image + 0.15 { break; }
            est.process_imu(**s).unwrap();
            imu.next();
        }
        let fi = FrameInput {
            t_image: f.t_image,
            tracks: f.observations.clone(),
        };
        match est.process_frame(&fi) {
            Ok(out) => {
                let (acc, iters) = out.solve.as_ref().map(|s| (s.accepted_steps, s.iterations.len())).unwrap_or((0, 0));
                println!("t {:6.3}  td {:9.4} ms  acc {}/{}  feats {}", f.t_image, out.td * 1e3, acc, iters, out.active_features);
            }
            Err(e) => {
                println!("t {:6.3}  ERROR {e}", f.t_image);
                break;
            }
        }
    }
}
