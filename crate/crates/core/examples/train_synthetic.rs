//! Trains the encoder with EMS on synthetic photo/sketch data and checks the
//! embedding on a fresh draw.

use margin_metric::dataset::{generate, SyntheticConfig};
use margin_metric::retrieval::{distance_report, mean_average_precision};
use margin_metric::training::{train, TrainConfig};
use margin_metric::{Domain, LossConfig, Result};

fn main() -> Result<()> {
    let data_cfg = SyntheticConfig::default();
    let train_set = generate(&data_cfg)?.samples;
    let test_set = generate(&SyntheticConfig {
        noise_seed: Some(1000),
        ..data_cfg
    })?
    .samples;

    let cfg = TrainConfig {
        loss: LossConfig::ems(4.0),
        steps: 3000,
        lr: 1e-2,
        ..Default::default()
    };
    let out = train(&train_set, &cfg)?;
    for r in out.log.records.iter().step_by(500) {
        println!("step {:>5} lr {:.2e} loss {:.4}", r.step, r.lr, r.loss);
    }

    let emb = out.embed(&test_set)?;
    let map = mean_average_precision(&emb.domain(Domain::Sketch), &emb.domain(Domain::Photo))?;
    let report = distance_report(&out.embed(&train_set)?)?;
    println!("sketch->photo MAP on a fresh draw: {map:.4}");
    println!("every class tighter than its nearest neighbour: {}", report.p1);
    Ok(())
}
