use numcore::Tensor;
use rand::Rng;

/// Tensor with entries drawn uniformly from `[-scale, scale)`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}
