//! Holds two classes out of training and retrieves them afterwards.

use margin_metric::dataset::{generate, split_zero_shot, SplitSpec, SyntheticConfig};
use margin_metric::retrieval::{evaluate_euclidean, EvalOptions};
use margin_metric::training::{train, TrainConfig};
use margin_metric::{Domain, LossConfig, Result};

fn main() -> Result<()> {
    let cfg = SyntheticConfig::default();
    let data = generate(&cfg)?.samples;
    let test = generate(&SyntheticConfig {
        noise_seed: Some(1000),
        ..cfg
    })?
    .samples;

    let spec = SplitSpec::zero_shot(vec![8, 9]);
    let (source, _) = split_zero_shot(&data, &spec)?;
    let (_, target) = split_zero_shot(&test, &spec)?;
    let out = train(
        &source,
        &TrainConfig {
            loss: LossConfig::ems(4.0),
            steps: 3000,
            lr: 1e-2,
            ..Default::default()
        },
    )?;

    let queries = out.embed(&target)?.domain(Domain::Sketch);
    let unseen_photos = out.embed(&target)?.domain(Domain::Photo);
    let all_photos = out.embed(&test)?.domain(Domain::Photo);
    for (name, gallery) in [("unseen classes only", &unseen_photos), ("all classes", &all_photos)] {
        let s = evaluate_euclidean(&queries, gallery, &EvalOptions::default())?;
        println!(
            "{name:<20} MAP {:.4} vs random {:.4} ({:.2}x)",
            s.map,
            s.random_map,
            s.map / s.random_map
        );
    }
    Ok(())
}
