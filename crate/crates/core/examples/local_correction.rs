//! A counter that fires on an object-free distractor: one "0" answer on the
//! region covering it suppresses the false mass while the objects keep theirs.
//!
//! ```text
//! cargo run --example local_correction
//! ```

use icount::counter::{synthesize_counter, Miscalibration};
use icount::density::DotScene;
use icount::session::{InteractiveSession, SessionConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = DotScene {
        height: 128,
        width: 128,
        sigma: 2.0,
        dots: vec![[12.0, 14.0], [20.0, 110.0], [110.0, 18.0], [112.0, 108.0], [30.0, 60.0]],
    };
    let blob = Miscalibration::LocalBlob {
        center: [70.0, 70.0],
        radius: 10.0,
        magnitude: 2.5,
        channel: Some(5),
    };
    let synth = synthesize_counter(&scene, &blob, 5)?;
    let gt = synth.ground_truth.clone();
    let mut session = InteractiveSession::new(synth.counter, Some(gt.clone()), SessionConfig::default())?;

    let region = session.labels().get(70, 70);
    let pixels = session.region_pixels(region)?.to_vec();
    println!(
        "before: total {:.2} (truth {:.2}), distractor region {:.2}",
        session.predicted_total(),
        gt.total(),
        session.prediction().sum_over(&pixels)
    );
    session.submit(region, 0)?;
    println!(
        "after:  total {:.2}, former distractor region {:.2}",
        session.predicted_total(),
        session.prediction().sum_over(&pixels)
    );
    Ok(())
}
