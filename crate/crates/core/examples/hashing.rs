//! Learns binary codes for trained prototypes and retrieves by Hamming distance.

use margin_metric::dataset::{generate, SyntheticConfig};
use margin_metric::hashing::{encode_binary, hamming_distance, train_hasher, HashCodes, HashConfig, HashTerms};
use margin_metric::retrieval::{mean_average_precision, mean_average_precision_hamming};
use margin_metric::training::{train, TrainConfig};
use margin_metric::{Domain, LossConfig, Result};

fn main() -> Result<()> {
    let data = generate(&SyntheticConfig {
        classes: 6,
        per_class: 60,
        ..Default::default()
    })?
    .samples;
    let out = train(
        &data,
        &TrainConfig {
            loss: LossConfig::ems(4.0),
            steps: 1500,
            lr: 1e-2,
            ..Default::default()
        },
    )?;
    let emb = out.embed(&data)?;

    for terms in [HashTerms::REC_SCAT, "r+q".parse()?] {
        let cfg = HashConfig {
            bits: 32,
            steps: 4000,
            terms,
            ..Default::default()
        };
        let trained = train_hasher(&out.prototypes, Some(&emb), &cfg)?;
        let ae = &trained.autoencoder;
        let q = emb.domain(Domain::Sketch);
        let g = emb.domain(Domain::Photo);
        let hamming = mean_average_precision_hamming(&HashCodes::encode(ae, &q)?, &HashCodes::encode(ae, &g)?)?;
        println!(
            "{terms}: loss {:.4} -> {:.4}, Hamming MAP {hamming:.4}, Euclidean MAP {:.4}",
            trained.initial.total,
            trained.final_terms.total,
            mean_average_precision(&q, &g)?
        );

        let a = encode_binary(ae, out.prototypes.center(0))?;
        let b = encode_binary(ae, out.prototypes.center(1))?;
        println!("  class 0 {a}\n  class 1 {b}\n  distance {}", hamming_distance(&a, &b)?);
    }
    Ok(())
}
