//! Class-balanced patch sampling from one synthetic slide.
//!
//! ```text
//! cargo run --release --example balanced_patches
//! ```

use dermaseg::data::Disease;
use dermaseg::sampler::{extract_patches, PatchType, SamplerConfig, SlideData};
use dermaseg::synth::{generate_slide, GenConfig, Span};

fn main() -> dermaseg::Result<()> {
    // a large slide with a thick epidermis, so every patch type is plentiful
    let gen = GenConfig {
        slide_size: (4096, 4096),
        spongiosis_blob_count: Span::new(4, 4),
        spongiosis_blob_radius: Span::new(0.04, 0.05),
        epidermis_band: Span::new(0.12, 0.13),
        ..GenConfig::default()
    };
    let (image, mask) = generate_slide(&gen, 0, Disease::Mf);
    let slide = SlideData::new("demo", image, mask)?;

    let cfg = SamplerConfig::default();
    let t0 = std::time::Instant::now();
    let patches = extract_patches(&slide, &cfg, 1)?;
    println!("{} patches in {:.2?}", patches.len(), t0.elapsed());
    for t in PatchType::ALL {
        let n = patches.iter().filter(|p| p.patch_type == t).count();
        println!("{t:>12}: {n}");
    }

    let closest = patches
        .iter()
        .enumerate()
        .flat_map(|(i, a)| patches[i + 1..].iter().map(move |b| (a, b)))
        .map(|(a, b)| (a.x as f64 - b.x as f64).hypot(a.y as f64 - b.y as f64))
        .fold(f64::INFINITY, f64::min);
    println!(
        "closest corner pair: {closest:.1} px (minimum {})",
        cfg.min_corner_distance
    );
    Ok(())
}
