//! Corrects a counter that overcounts by a constant factor from a single
//! range answer on one region, then shows how the whole-image total moved.
//!
//! ```text
//! cargo run --example adapt_global_scale -- [alpha]
//! ```

use icount::adapt::{adapt, AdaptConfig, AdaptState, FeedbackRecord};
use icount::counter::{synthesize_counter, Miscalibration};
use icount::density::DotScene;
use icount::ipse::{segment_full_resolution, SegmentationConfig};
use icount::sim::RangeFamily;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let alpha: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scene = DotScene {
        height: 256,
        width: 256,
        sigma: 2.0,
        dots: (0..60)
            .map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)])
            .collect(),
    };
    let synth = synthesize_counter(&scene, &Miscalibration::GlobalScale { alpha }, 3)?;
    let (counter, gt) = (synth.counter, synth.ground_truth);
    let mut state = AdaptState::identity(&counter);
    let pred = counter.forward(&state.params);
    println!("truth {:.2}, prediction {:.2}", gt.total(), pred.total());

    // the user answers for the most overcounted region with a bounded range
    let family = RangeFamily::default();
    let seg = segment_full_resolution(&pred, &SegmentationConfig::default())?;
    let pixels = seg
        .labels
        .pixels_by_label()
        .into_iter()
        .filter(|px| family.range(family.bin_index(gt.sum_over(px))).is_ok_and(|r| r.upper().is_finite()))
        .max_by(|a, b| {
            let err = |px: &[usize]| pred.sum_over(px) - gt.sum_over(px);
            err(a).total_cmp(&err(b))
        })
        .ok_or("no region with a bounded answer")?;
    let range = family.range(family.bin_index(gt.sum_over(&pixels)))?;
    println!(
        "region of {} px: predicted {:.2}, answered {}",
        pixels.len(),
        pred.sum_over(&pixels),
        range.label()
    );

    let omega = vec![FeedbackRecord {
        region_id: 0,
        pixels: pixels.clone(),
        range,
        iteration: 0,
    }];
    let out = adapt(&counter, &mut state, &omega, &AdaptConfig::default())?;
    println!(
        "after {} steps (confidence {:.2}): region {:.2}, total {:.2}",
        out.steps,
        out.confidence,
        out.prediction.sum_over(&pixels),
        out.prediction.total()
    );
    Ok(())
}
