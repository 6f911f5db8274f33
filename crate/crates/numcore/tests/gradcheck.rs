use numcore::{finite_diff_check, gradients, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = vec![
        random_tensor(&mut rng, &[6, 4], 0.8),
        random_tensor(&mut rng, &[5, 6], 0.8),
        random_tensor(&mut rng, &[3, 5], 0.8),
        random_tensor(&mut rng, &[4], 1.0),
    ];
    let report = finite_diff_check(&params, 1e-5, |t, v| {
        let h1 = t.matmul(v[0], v[3])?;
        let h1 = t.tanh(h1);
        let h2 = t.matmul(v[1], h1)?;
        let h2 = t.tanh(h2);
        let logits = t.matmul(v[2], h2)?;
        t.cross_entropy(logits, 1)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

/// Builds a random differentiable graph over `x` and two weight matrices.
fn random_graph(seed: u64) -> (Vec<Tensor>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..6);
    let params = vec![
        random_tensor(&mut rng, &[n], 1.0),
        random_tensor(&mut rng, &[n, n], 0.9),
        random_tensor(&mut rng, &[n, n], 0.9),
        random_tensor(&mut rng, &[3, n], 0.9),
    ];
    let ops = (0..rng.random_range(2..7)).map(|_| rng.random_range(0..9)).collect();
    (params, ops)
}

fn eval_graph<'p>(t: &mut Tape<'p>, v: &[Var], ops: &[u8]) -> Result<Var> {
    let n = t.value(v[0]).len();
    let mut cur = v[0];
    for (i, op) in ops.iter().enumerate() {
        let w = v[1 + i % 2];
        cur = match op {
            0 => t.matmul(w, cur)?,
            1 => t.tanh(cur),
            2 => t.sigmoid(cur),
            3 => {
                let s = t.sigmoid(cur);
                t.mul(s, cur)?
            }
            4 => {
                let a = t.matmul(w, cur)?;
                let b = t.tanh(a);
                t.add(b, cur)?
            }
            5 => t.softmax(cur)?,
            6 => {
                let s = t.sigmoid(cur);
                let s = t.scale(s, 0.5);
                let e = t.exp(s);
                t.log(e)
            }
            7 => {
                let head = t.slice(cur, 0, 1)?;
                let tail = t.slice(cur, 1, n - 1)?;
                let tail = t.tanh(tail);
                t.concat(&[tail, head])?
            }
            _ => {
                let ls = t.log_softmax(cur)?;
                t.scale(ls, 0.3)
            }
        };
    }
    let logits = t.matmul(v[3], cur)?;
    t.cross_entropy(logits, 2)
}

#[test]
fn random_graphs_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let (params, ops) = random_graph(seed);
        let report = finite_diff_check(&params, 1e-5, |t, v| eval_graph(t, v, &ops)).unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "seed {seed} ops {ops:?}: {report:?}"
        );
        worst = worst.max(report.max_rel_error);
    }
    println!("worst relative error over 100 graphs: {worst:e}");
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let (params, ops) = random_graph(11);
    let run = || {
        let mut tape = Tape::new();
        let vars: Vec<(String, Var)> = params
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("p{i}"), tape.param(p)))
            .collect();
        let plain: Vec<Var> = vars.iter().map(|(_, v)| *v).collect();
        let loss = eval_graph(&mut tape, &plain, &ops).unwrap();
        gradients(&tape, loss, &vars).unwrap()
    };
    let a = run();
    let b = run();
    for (name, g) in &a {
        let bits_a: Vec<u64> = g.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b[name].data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}
