//! Closed-form attention backward checked against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ring2d::{attention_backward, full_attention, DenseTensor};

fn main() -> ring2d::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (heads, kv_heads, seq, dim) = (4, 2, 8, 4);
    let q = DenseTensor::<f64>::random(heads, seq, dim, &mut rng);
    let k = DenseTensor::<f64>::random(kv_heads, seq, dim, &mut rng);
    let v = DenseTensor::<f64>::random(kv_heads, seq, dim, &mut rng);
    let g = DenseTensor::<f64>::random(heads, seq, dim, &mut rng);
    let loss = |q: &DenseTensor<f64>, k: &DenseTensor<f64>, v: &DenseTensor<f64>| -> f64 {
        let (o, _) = full_attention(q, k, v, true).unwrap();
        o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    };

    let grads = attention_backward(&q, &k, &v, &g, true)?;
    let eps = 1e-5;
    for (name, which, analytic) in [
        ("dQ", 0, &grads.dq),
        ("dK", 1, &grads.dk),
        ("dV", 2, &grads.dv),
    ] {
        let mut worst: f64 = 0.0;
        for i in 0..analytic.data().len() {
            let mut plus = [q.clone(), k.clone(), v.clone()];
            let mut minus = plus.clone();
            plus[which].data_mut()[i] += eps;
            minus[which].data_mut()[i] -= eps;
            let fd = (loss(&plus[0], &plus[1], &plus[2]) - loss(&minus[0], &minus[1], &minus[2]))
                / (2.0 * eps);
            worst = worst.max((fd - analytic.data()[i]).abs());
        }
        println!("{name}: max |analytic - finite difference| = {worst:.2e}");
    }
    Ok(())
}
