//! Log band-energy maps of a synthetic chirp with both presets, written to
//! a feature container and read back.
//!
//! ```text
//! cargo run --example features
//! ```

use pbn::features::{extract, read_features, write_features, FeatureConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rate = 16_000.0;
    let wave: Vec<f64> = (0..16_000)
        .map(|i| {
            let t = i as f64 / rate;
            (2.0 * std::f64::consts::PI * (200.0 + 3000.0 * t) * t).sin()
        })
        .collect();
    let mut maps = Vec::new();
    for (name, cfg) in [
        ("mel", FeatureConfig::exp1(rate)),
        ("linear", FeatureConfig::exp2(rate)),
    ] {
        let map = extract(&cfg, &wave, name)?;
        let peak = |t: usize| {
            (0..map.bands())
                .max_by(|&a, &b| map.values[(t, a)].total_cmp(&map.values[(t, b)]))
                .unwrap()
        };
        println!(
            "{name}: {} frames x {} bands, loudest band {} at the start and {} at the end",
            map.frames(),
            map.bands(),
            peak(1),
            peak(map.frames() - 2)
        );
        maps.push(map);
    }
    let path = std::env::temp_dir().join("pbn-chirp.pbnf");
    write_features(&path, &maps)?;
    let back = read_features(&path)?;
    println!(
        "{} maps round-tripped through {}: {}",
        back.len(),
        path.display(),
        back == maps
    );
    Ok(())
}
