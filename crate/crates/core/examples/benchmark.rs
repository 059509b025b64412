//! Runs the full pipeline on the default night benchmark for a few seeds.
//!
//! cargo run --release --example benchmark -- OUT_DIR [SEED...]

use std::path::PathBuf;
use std::time::Instant;

use yodar::config::RunConfig;
use yodar::pipeline::run_all;

fn main() -> yodar::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "bench".into()));
    let seeds: Vec<u64> = args
        .map(|a| a.parse().expect("seed must be an integer"))
        .collect();
    let seeds = if seeds.is_empty() {
        vec![1, 2, 3]
    } else {
        seeds
    };
    for seed in seeds {
        let start = Instant::now();
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let outcome = run_all(&cfg, &out.join(format!("seed{seed}")))?;
        println!("seed {seed} ({:.1} s)", start.elapsed().as_secs_f64());
        print!("{}", yodar::report::summary_text(&outcome.summaries));
        for r in &outcome.fp_rows {
            println!(
                "  {:<15} th {:?} TP {} FP {} {}",
                r.detector, r.threshold, r.tp, r.fp, r.note
            );
        }
        let cam = outcome.bin_rows("camera").unwrap_or_default();
        let fused = outcome.bin_rows("fused").unwrap_or_default();
        let line: Vec<String> = cam
            .iter()
            .zip(fused)
            .map(|(c, f)| format!("{}/{}/{}", c.gt, c.tp_matched, f.tp_matched))
            .collect();
        println!("  bins gt/cam/fused: {}", line.join(" "));
    }
    Ok(())
}
