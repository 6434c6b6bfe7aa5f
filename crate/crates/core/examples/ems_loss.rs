//! Compares the margin losses on one hand-made batch.

use margin_metric::linalg::Matrix;
use margin_metric::losses::{ems_loss, prototypical_loss, squared_ems_loss};
use margin_metric::{EmbeddingBatch, PrototypeSet, Result};

fn main() -> Result<()> {
    let protos = PrototypeSet::new(Matrix::from_rows(&[[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])?)?;
    let points = Matrix::from_rows(&[[0.5, 0.2], [3.1, 0.4], [0.3, 2.2], [2.0, 2.0]])?;
    let batch = EmbeddingBatch::single_domain(points, vec![0, 1, 2, 0])?;

    println!("{:>5} {:>10} {:>12}", "m", "ems", "squared-ems");
    for m in [1.0, 2.0, 4.0, 8.0] {
        let a = ems_loss(&batch, &protos, m)?;
        let b = squared_ems_loss(&batch, &protos, m)?;
        println!("{m:>5} {:>10.4} {:>12.4}", a.loss, b.loss);
    }

    let p = prototypical_loss(&batch, &protos)?;
    let s = squared_ems_loss(&batch, &protos, 1.0)?;
    println!("prototypical {:.6} == squared-ems at m=1 {:.6}", p.loss, s.loss);
    Ok(())
}
