//! Renders a random dot scene and prints its near-integer region partition.
//!
//! ```text
//! cargo run --example render_and_segment -- [dots] [seed]
//! ```

use icount::density::{render_density, DotScene};
use icount::ipse::{segment_full_resolution, RegionKind, SegmentationConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dots: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(40);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = DotScene {
        height: 256,
        width: 256,
        sigma: 2.0,
        dots: (0..dots)
            .map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)])
            .collect(),
    };
    let density = render_density(&scene)?;
    let seg = segment_full_resolution(&density, &SegmentationConfig::default())?;

    let sums = seg.labels.sums(&density);
    println!("total {:.3} over {} regions", density.total(), sums.len());
    println!("  id  kind        area     sum");
    for r in &seg.working.regions {
        let kind = match r.kind {
            RegionKind::Foreground => "foreground",
            RegionKind::Background => "background",
        };
        let area = seg.labels.labels().iter().filter(|&&l| l == r.id).count();
        println!("{:>4}  {kind:<10} {area:>5}  {:>6.3}", r.id, sums[r.id as usize]);
    }
    Ok(())
}
