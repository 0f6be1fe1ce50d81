use tcvio::pipeline::{dataset_from_sim, run_dataset, RunOptions};
use tcvio::sim::{NoiseSpec, SimScenario, Simulator};
use tcvio::preintegration::ImuNoise;

fn main() {
    let scn = SimScenario::default_sinusoid3d(
        60.0, 0.020,
        NoiseSpec { imu: ImuNoise::default(), pixel_sigma: 1.0, seed: 1 },
    );
    let sim = Simulator::new(scn).unwrap();
    let ds = dataset_from_sim(&sim).unwrap();
    match run_dataset(&ds, &RunOptions::default()) {
        Ok(out) => println!("ok, final td {:.4} ms", out.report.final_td_ms),
        Err(e) => println!("ERROR: {e:#?}"),
    }
}
