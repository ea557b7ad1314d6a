use dermaseg::data::{ClassMask, Disease};
use dermaseg::synth::{generate_slide, GenConfig};

fn spongiosis_share(m: &ClassMask) -> f64 {
    m.as_slice().iter().filter(|&&c| c == 2).count() as f64 / m.as_slice().len() as f64
}

/// One-sided Mann-Whitney U test (normal approximation with tie-averaged
/// ranks) of "x tends to exceed y". Returns the z score.
fn mann_whitney_z(x: &[f64], y: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = x
        .iter()
        .map(|&v| (v, true))
        .chain(y.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_x = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_x += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg;
        i = j + 1;
    }
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let u = rank_sum_x - n1 * (n1 + 1.0) / 2.0;
    (u - n1 * n2 / 2.0) / (n1 * n2 * (n1 + n2 + 1.0) / 12.0).sqrt()
}

#[test]
fn eczema_slides_carry_more_spongiosis() {
    let cfg = GenConfig {
        slide_size: (256, 256),
        ..GenConfig::default()
    };
    let share = |d: Disease, offset: usize| -> Vec<f64> {
        (0..25)
            .map(|i| spongiosis_share(&generate_slide(&cfg, offset + i, d).1))
            .collect()
    };
    let eczema = share(Disease::Eczema, 0);
    let mf = share(Disease::Mf, 25);
    let z = mann_whitney_z(&eczema, &mf);
    // one-sided 1% critical value
    assert!(z > 2.326, "z = {z:.3}");
}

#[test]
fn rank_test_matches_a_hand_example() {
    // x = {3, 4}, y = {1, 2}: U = 4, mean 2, variance 4 * 5 / 12
    let z = mann_whitney_z(&[3.0, 4.0], &[1.0, 2.0]);
    assert!((z - 2.0 / (20.0f64 / 12.0).sqrt()).abs() < 1e-12);
}
