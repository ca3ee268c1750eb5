use sendvae::experiment::{run_sweep, smoke_config};
use std::time::Instant;

fn main() {
    sendvae::init_threads();
    let dir = std::env::temp_dir().join(format!("sendvae-smoke-{}", std::process::id()));
    let cfg = smoke_config();
    let t0 = Instant::now();
    match run_sweep(&cfg, &dir, false) {
        Ok(out) => {
            println!("sweep done in {:.1}s, failures {}", t0.elapsed().as_secs_f64(), out.partial_failures);
            if let Some(r) = out.report {
                println!("{}", r.to_markdown());
            }
            for m in &out.manifests {
                for s in &m.stages {
                    println!("  {} ran={} {:.1}s", s.name, !s.skipped, s.wall_clock_secs);
                }
                if let Some(p) = &m.partial { println!("  PARTIAL: {} {}", p.stage, p.error); }
            }
        }
        Err(e) => println!("sweep failed: {e}"),
    }
    let _ = std::fs::remove_dir_all(&dir);
}
