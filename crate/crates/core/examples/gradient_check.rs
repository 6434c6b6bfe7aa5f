//! Finite-difference check of every loss, alone and through the encoder.

use margin_metric::encoder::init_params;
use margin_metric::gradcheck::{encoder_grad_check, grad_check, random_inputs, random_instance, tolerance, DEFAULT_STEP};
use margin_metric::{LossConfig, LossKind, Result};

fn main() -> Result<()> {
    for kind in LossKind::ALL {
        let cfg = LossConfig::with_defaults(kind);
        let inst = random_instance(&cfg, 8, 5, 4, 7);
        let head = grad_check(&cfg, &inst, DEFAULT_STEP)?;

        let params = init_params(&[6, 8, 5], 4, 7)?;
        let inputs = random_inputs(8, 6, 4, 7);
        let full = encoder_grad_check(&params, &inputs, &cfg, &inst.head, DEFAULT_STEP)?;

        println!(
            "{:<13} loss {:>9.2e}  encoder {:>9.2e}  tol {:.0e}",
            kind.name(),
            head.max_rel_error,
            full.max_rel_error,
            tolerance(kind)
        );
    }
    Ok(())
}
