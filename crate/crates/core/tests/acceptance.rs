use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use ntg::harness::acceptance::{run_suite, CRITERIA};

fn main() -> ExitCode {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).expect("clearing previous acceptance run");
    }
    let only: Vec<u32> = std::env::var("NTG_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let start = Instant::now();
    let results = match run_suite(&dir, &only) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("acceptance suite aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!("\nacceptance ({} criteria, artifacts in {})", results.len(), dir.display());
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} passed, {failed} failed in {:.0}s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );

    let expected = if only.is_empty() { CRITERIA.len() } else { only.len() };
    if results.len() != expected {
        eprintln!("expected {expected} criterion results, got {}", results.len());
        return ExitCode::FAILURE;
    }
    if failed > 0 && std::env::var_os("NTG_ACCEPT_STRICT").is_some() {
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
