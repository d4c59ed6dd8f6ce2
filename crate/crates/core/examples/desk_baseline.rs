//! Desk-scale learning-signal baseline: pre-train on synthetic data,
//! fine-tune, and compare against an untrained-encoder control.
//!
//! cargo run --release -p me-mhacl-core --example desk_baseline [seeds]

use me_mhacl::eval::learning_signal;
use me_mhacl::synth::SynthSpec;
use me_mhacl::train::ExperimentConfig;

fn main() -> me_mhacl::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let pre = ExperimentConfig::preset("desk_pretrain")?;
    let ft = ExperimentConfig::preset("desk_finetune")?;
    let target = 0.8 * ((2 * pre.p - 1) as f64).ln();
    let spec = SynthSpec::desk(0);
    let (mut pa, mut ca) = (0.0, 0.0);
    for seed in 0..seeds {
        let t = std::time::Instant::now();
        let r = learning_signal(&spec, &pre, &ft, seed)?;
        println!(
            "seed {seed}: first loss {:.3}, min loss {:.3}, below {target:.3} at epoch {:?}, pretrained {:.3}, control {:.3} ({:.1}s)",
            r.epoch_losses[0],
            r.min_epoch_loss(),
            r.first_epoch_below(target),
            r.pretrained_accuracy,
            r.control_accuracy,
            t.elapsed().as_secs_f64()
        );
        pa += r.pretrained_accuracy;
        ca += r.control_accuracy;
    }
    println!("mean pretrained {:.3}, mean control {:.3}", pa / seeds as f64, ca / seeds as f64);
    Ok(())
}
