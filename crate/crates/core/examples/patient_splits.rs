//! Patient-grouped train/val/test split and cross-validation folds.
//!
//! ```text
//! cargo run --release --example patient_splits
//! ```

use std::collections::BTreeMap;

use dermaseg::data::{make_folds, make_split, Disease, Manifest, SlideRecord, SplitCell, SplitFractions};

fn main() -> dermaseg::Result<()> {
    // 30 patients with 1-3 slides each, roughly one in three with MF
    let mut slides = Vec::new();
    for p in 0..30 {
        let disease = if p % 3 == 0 { Disease::Mf } else { Disease::Eczema };
        for s in 0..1 + p % 3 {
            slides.push(SlideRecord {
                slide_id: format!("p{p:02}-s{s}"),
                patient_id: format!("p{p:02}"),
                disease,
                image_path: format!("slides/p{p:02}-s{s}.png").into(),
                mask_path: None,
                width: 1024,
                height: 1024,
            });
        }
    }
    let m = Manifest::new(7, slides, ".")?;

    let split = make_split(&m, SplitFractions::default(), 7)?;
    for cell in [SplitCell::Train, SplitCell::Val, SplitCell::Test] {
        let ids = split.slides_in(cell);
        let mf = ids
            .iter()
            .filter(|id| m.get(id).unwrap().disease == Disease::Mf)
            .count();
        println!("{cell:>5}: {:2} slides, {mf:2} MF", ids.len());
    }

    let folds = make_folds(&m, 5, 7)?;
    let mut per_fold: BTreeMap<SplitCell, (usize, usize)> = BTreeMap::new();
    for rec in &m.slides {
        let e = per_fold.entry(folds.cell_of(&rec.slide_id).unwrap()).or_default();
        e.0 += 1;
        e.1 += (rec.disease == Disease::Mf) as usize;
    }
    for (cell, (n, mf)) in per_fold {
        println!("{cell}: {n:2} slides, {mf:2} MF");
    }

    // no patient straddles two folds
    let mut seen: BTreeMap<&str, SplitCell> = BTreeMap::new();
    for rec in &m.slides {
        let c = folds.cell_of(&rec.slide_id).unwrap();
        assert_eq!(*seen.entry(&rec.patient_id).or_insert(c), c);
    }
    Ok(())
}
