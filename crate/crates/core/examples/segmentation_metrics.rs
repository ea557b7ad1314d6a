//! The six segmentation metrics on hand-made masks, with the micro-averaged
//! counts behind them.
//!
//! ```text
//! cargo run --release --example segmentation_metrics
//! ```

use dermaseg::data::ClassMask;
use dermaseg::metrics::{self, ClassCounts, EvalReport, MetricVector, SlideResult};

fn main() -> dermaseg::Result<()> {
    let c = ClassCounts {
        tp: 2,
        fp: 1,
        fn_: 1,
        tn: 6,
    };
    let m = MetricVector::from_counts(&c);
    println!("TP=2 FP=1 FN=1 TN=6");
    for (name, v) in MetricVector::NAMES.iter().zip(m.values()) {
        println!("  {name:>9} = {v:.6}");
    }

    // two slides, three classes: 0 rest, 1 epidermis, 2 spongiosis
    let gt = ClassMask::new(4, 2, vec![0, 0, 1, 1, 0, 1, 2, 2])?;
    let good = ClassMask::new(4, 2, vec![0, 0, 1, 1, 0, 1, 2, 1])?;
    let poor = ClassMask::new(4, 2, vec![0, 1, 1, 0, 0, 2, 1, 2])?;
    let slides = vec![
        SlideResult::new("good", metrics::count(&good, &gt, 3)?),
        SlideResult::new("poor", metrics::count(&poor, &gt, 3)?),
    ];
    for s in &slides {
        let agg = s.counts.aggregate();
        println!(
            "{}: summed counts tp={} fp={} fn={} tn={}, precision = recall = {:.3}",
            s.slide_id, agg.tp, agg.fp, agg.fn_, agg.tn, s.metrics.precision
        );
    }
    let report = metrics::report("demo", slides)?;
    println!("\n{}", EvalReport::table(&[&report]));
    Ok(())
}
