//! Compares the analytic refinement gradient of a synthesized counter with
//! central finite differences on every parameter.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use icount::counter::{synthesize_counter, Miscalibration};
use icount::density::DotScene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// small enough that few perturbations cross a ReLU kink
const STEP: f64 = 1e-7;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = DotScene {
        height: 24,
        width: 24,
        sigma: 2.0,
        dots: vec![[5.0, 6.0], [17.5, 9.0], [11.0, 19.0]],
    };
    let counter = synthesize_counter(&scene, &Miscalibration::GlobalScale { alpha: 1.3 }, 8)?.counter;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = counter.identity_params();
    for block in params.blocks_mut() {
        block.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    let (h, w) = counter.output_shape();
    let upstream: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |p: &icount::counter::RefinementParams| -> f64 {
        counter.forward(p).values().iter().zip(&upstream).map(|(d, g)| d * g).sum()
    };

    let analytic = counter.backward(&params, &upstream);
    let names = ["channel scale", "channel bias", "spatial scale", "spatial bias"];
    for (b, name) in names.iter().enumerate() {
        let scale = analytic.blocks()[b].iter().fold(1e-12_f64, |m, g| m.max(g.abs()));
        let mut worst: f64 = 0.0;
        for i in 0..params.blocks()[b].len() {
            let mut plus = params.clone();
            plus.blocks_mut()[b][i] += STEP;
            let mut minus = params.clone();
            minus.blocks_mut()[b][i] -= STEP;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * STEP);
            let exact = analytic.blocks()[b][i];
            worst = worst.max((numeric - exact).abs() / scale);
        }
        println!("{name:<14} {:>5} params, worst error relative to the largest gradient {worst:.2e}", params.blocks()[b].len());
    }
    Ok(())
}
