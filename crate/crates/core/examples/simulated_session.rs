//! Drives an interactive session with a simulated annotator and prints the
//! count error after every interaction.
//!
//! ```text
//! cargo run --example simulated_session -- [interactions] [seed]
//! ```

use icount::counter::{synthesize_counter, Miscalibration};
use icount::density::DotScene;
use icount::session::{InteractiveSession, SessionConfig};
use icount::sim::{SimulatedUser, UserConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let interactions: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = DotScene {
        height: 192,
        width: 192,
        sigma: 2.0,
        dots: (0..rng.random_range(40..120))
            .map(|_| [rng.random_range(0.0..192.0), rng.random_range(0.0..192.0)])
            .collect(),
    };
    let synth = synthesize_counter(&scene, &Miscalibration::GlobalScale { alpha: 1.6 }, seed)?;
    let gt = synth.ground_truth.clone();
    let config = SessionConfig::default();
    let mut user = SimulatedUser::new(UserConfig::default(), config.family.clone(), seed);
    let mut session = InteractiveSession::new(synth.counter, Some(gt.clone()), config)?;

    println!("truth {:.2}", gt.total());
    println!("iteration {:>2}: predicted {:>8.2}", 0, session.predicted_total());
    for i in 1..=interactions {
        user.observe_segmentation(session.labels());
        let record = user.respond(
            &session.segmentation().working.regions,
            session.labels(),
            &gt,
            &scene.dots,
            session.prediction(),
            session.iteration(),
        )?;
        let (region, range) = (record.region_id, record.range.label());
        session.push_record(record)?;
        let out = session.adapt_and_refresh()?;
        println!(
            "iteration {i:>2}: predicted {:>8.2}  (region {region} in {range}, {} steps)",
            session.predicted_total(),
            out.steps
        );
    }
    Ok(())
}
