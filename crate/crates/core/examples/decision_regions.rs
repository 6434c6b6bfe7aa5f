//! Decision balls and the sampled intra/inter distances around the 2+sqrt(3) threshold.

use margin_metric::geometry::{binary_margin_bounds, decision_ball, minimum_margin, verify_p2};
use margin_metric::linalg::Matrix;
use margin_metric::{PrototypeSet, Result};

fn main() -> Result<()> {
    let (a, b) = ([0.0, 0.0], [1.0, 0.0]);
    for m in [2.0, 4.0, 8.0] {
        let ball = decision_ball(&a, &b, m)?;
        println!("m={m}: center {:?} radius {:.4}", ball.center, ball.radius);
    }

    let root = minimum_margin();
    println!("threshold {root:.6}");
    for m in [3.0, root, 4.0] {
        let bounds = binary_margin_bounds(m, 1.0)?;
        println!("m={m:.4}: max intra {:.4}, min inter {:.4}", bounds.max_intra, bounds.min_inter);
    }

    let protos = PrototypeSet::new(Matrix::from_rows(&[a, b])?)?;
    for m in [3.0, root + 0.01] {
        let report = verify_p2(&protos, m, 200_000, 0)?;
        println!(
            "sampled m={m:.4}: {} violations, max intra {:?}",
            report.violations, report.max_intra
        );
    }
    Ok(())
}
