//! Writes a small synthetic dataset and prints what went into it.
//!
//! ```text
//! cargo run --release --example generate_slides -- [out_dir]
//! ```

use std::path::PathBuf;

use dermaseg::data::Disease;
use dermaseg::synth::{class_proportions, generate_dataset, generate_slide, GenConfig};

fn main() -> dermaseg::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dermaseg-generate"));
    let cfg = GenConfig {
        slide_size: (512, 512),
        ..GenConfig::smoke()
    };
    let manifest = generate_dataset(&cfg, &out)?;
    println!(
        "{} slides from {} patients ({} MF, {} eczema) in {}",
        manifest.slides.len(),
        manifest.patients().len(),
        manifest.count(Disease::Mf),
        manifest.count(Disease::Eczema),
        out.display()
    );

    // The same slide index always yields the same pixels, whatever else is generated.
    for disease in [Disease::Mf, Disease::Eczema] {
        let (_, mask) = generate_slide(&cfg, 0, disease);
        let p = class_proportions(&mask);
        println!(
            "{:>2}: rest {:.3}  epidermis {:.3}  spongiosis {:.3}",
            disease.as_str(),
            p[&0],
            p[&1],
            p[&2]
        );
    }
    Ok(())
}
