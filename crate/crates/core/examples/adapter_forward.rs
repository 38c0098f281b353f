// One adapted layer in each singular-value mode: the values it produces,
// the increment it adds to the frozen weight, and a text round trip.

use std::error::Error;

use bilora::adapter::{init_adapter, LoraAdapter, SingularMode, W0Init};
use bilora::linalg::{gaussian_matrix, Rng};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let mut rng = Rng::new(7);
    let x = gaussian_matrix(&mut rng, 6, 4, 1.0)?;
    for mode in SingularMode::ALL {
        let mut a = init_adapter(&mut rng, 5, 6, 3, 3.0, mode, W0Init::Gaussian(1.0))?;
        let at_init = a.forward(&x)?.sub(&a.w0().matmul(&x)?)?.max_abs();
        a.set_v(&[0.8, -0.3, 1.5])?;
        let y = a.forward(&x)?;
        println!(
            "{:<13} lambda {:?}  |dW|_F {:.4}  init shift {:.2e}  defect {:.3}",
            mode.as_str(),
            a.lambda().iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>(),
            a.delta_w()?.frobenius(),
            at_init,
            a.orthogonality_defect()
        );
        let back = LoraAdapter::from_text(&a.to_text())?;
        assert_eq!(back.forward(&x)?, y);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
