//! Load the bundled configurations and report which structural assumptions
//! they satisfy in each mode.

use mfgc::model::{check_assumptions, Mode, ModelConfig};

fn main() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .expect("configs directory")
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    paths.sort();

    for path in paths {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let model = match ModelConfig::from_path(&path).and_then(|c| c.build()) {
            Ok(m) => m,
            Err(e) => {
                println!("{name:16} rejected: {e}");
                continue;
            }
        };
        for mode in [Mode::MeanField, Mode::NPlayer] {
            let r = check_assumptions(&model, mode);
            println!(
                "{name:16} {mode:?}: A {} B {} B' {} C {}  eps0 {:.3}  {}",
                r.holds_a,
                r.holds_b,
                r.holds_bprime,
                r.holds_c,
                r.eps0,
                if r.passed() { "ok".into() } else { r.failures.join("; ") }
            );
        }
    }
}
