//! The same input through the encoder as a photo and as a sketch.

use margin_metric::encoder::{forward, gate_values, init_params, CseGate};
use margin_metric::linalg::Matrix;
use margin_metric::{Domain, Result};

fn main() -> Result<()> {
    let params = init_params(&[6, 16, 4], 4, 3)?;
    println!("layers {:?}, {} parameters", params.dims(), params.num_parameters());

    let x = [0.4, -1.2, 0.3, 2.0, -0.5, 0.9];
    let inputs = Matrix::from_rows(&[x, x])?;
    let (out, trace) = forward(&params, &inputs, &[Domain::Photo, Domain::Sketch])?;
    println!("photo  embedding {:.4?}", out.row(0));
    println!("sketch embedding {:.4?}", out.row(1));
    if let Some(g) = trace.gates(0) {
        println!("photo  gates {:.3?}", g.row(0));
        println!("sketch gates {:.3?}", g.row(1));
    }

    // Only the domain column of the excitation separates the two gates.
    let features = [1.0, 0.5, -0.2, 0.0, 0.7, 1.5, -1.0, 0.2];
    let mut gate = CseGate::zeros(8, 2);
    gate.set_domain_column(&[2.0, -2.0, 0.0, 0.0, 1.0, -1.0, 0.5, 0.0]);
    println!("photo  gate {:.3?}", gate_values(&features, Domain::Photo, &gate)?);
    println!("sketch gate {:.3?}", gate_values(&features, Domain::Sketch, &gate)?);
    Ok(())
}
