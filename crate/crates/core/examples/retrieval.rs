//! Ranking, AP and precision@k on a tiny labelled gallery.

use margin_metric::linalg::Matrix;
use margin_metric::retrieval::{
    average_precision, evaluate_euclidean, expected_random_ap, precision_at_k, rank_euclidean, EvalOptions,
};
use margin_metric::{EmbeddingBatch, Result};

fn main() -> Result<()> {
    let gallery = EmbeddingBatch::single_domain(
        Matrix::from_rows(&[[0.0, 0.0], [0.1, 0.0], [1.0, 1.0], [0.0, 0.3], [2.0, 0.0], [1.1, 0.9]])?,
        vec![0, 0, 1, 1, 1, 0],
    )?;
    let query = [0.05, 0.1];
    let ranked = rank_euclidean(&query, &gallery)?;
    let rel = ranked.relevance(gallery.labels(), 0);
    println!("order {:?}", ranked.order);
    println!("relevant {rel:?}");
    println!("AP {:.4}", average_precision(&rel, 3)?);
    println!("P@2 {:.4}", precision_at_k(&rel, 2)?);
    println!("random-ranking AP {:.4}", expected_random_ap(6, 3));

    let queries = EmbeddingBatch::single_domain(Matrix::from_rows(&[query, [1.0, 0.8]])?, vec![0, 1])?;
    let scores = evaluate_euclidean(
        &queries,
        &gallery,
        &EvalOptions {
            top_k: None,
            precision_at: vec![1, 3],
        },
    )?;
    println!("{}", serde_json::to_string_pretty(&scores)?);
    Ok(())
}
