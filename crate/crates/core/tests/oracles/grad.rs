//! Central finite differences against the reverse-mode tape.

use lvseg_core::autodiff::{Graph, NodeId, Tensor};
use lvseg_core::sequence::{Image, Mask};
use lvseg_core::tfcnn::{conv_gru_step, GruParams, Mode, Network, NetworkConfig};
use lvseg_core::{CineSequence, MaskSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;

pub fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Worst per-tensor relative error `‖a − n‖ / (‖a‖ + ‖n‖)` between tape
/// gradients and central differences, over every input tensor.
pub fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &ids);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let l = f(&mut g, &ids);
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.len()];
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * H);
        }
        let diff: f64 = analytic[k].iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let na: f64 = analytic[k].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        if na + nn > 0.0 {
            worst = worst.max(diff / (na + nn));
        }
    }
    worst
}

/// Reduces any node to a scalar through a fixed random target.
pub fn to_scalar(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let n = g.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.mse(x, &target).unwrap()
}

pub fn conv2d_same() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ins = [random(&[2, 5, 6], 1.0, &mut rng), random(&[3, 2, 3, 3], 1.0, &mut rng), random(&[3], 1.0, &mut rng)];
    check(&ins, |g, id| {
        let c = g.conv2d(id[0], id[1], Some(id[2]), 1, 1).unwrap();
        to_scalar(g, c, 9)
    })
}

pub fn conv2d_strided() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ins = [random(&[2, 7, 7], 1.0, &mut rng), random(&[2, 2, 3, 3], 1.0, &mut rng)];
    check(&ins, |g, id| {
        let c = g.conv2d(id[0], id[1], None, 2, 0).unwrap();
        to_scalar(g, c, 8)
    })
}

pub fn maxpool() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ins = [random(&[2, 4, 6], 1.0, &mut rng)];
    check(&ins, |g, id| {
        let p = g.maxpool2(id[0]).unwrap();
        to_scalar(g, p, 7)
    })
}

pub fn upconv() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ins = [random(&[3, 3, 2], 1.0, &mut rng), random(&[3, 2, 2, 2], 1.0, &mut rng)];
    check(&ins, |g, id| {
        let u = g.upconv2(id[0], id[1]).unwrap();
        to_scalar(g, u, 6)
    })
}

/// Training-mode and running-statistics batch norm.
pub fn batchnorm() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ins = [random(&[3, 4, 4], 2.0, &mut rng), random(&[3], 1.5, &mut rng), random(&[3], 1.0, &mut rng)];
    let train = check(&ins, |g, id| {
        let (b, _) = g.batchnorm(id[0], id[1], id[2], 1e-5).unwrap();
        to_scalar(g, b, 55)
    });
    let mut g = Graph::new();
    let x = g.leaf(ins[0].clone());
    let (ga, be) = (g.leaf(ins[1].clone()), g.leaf(ins[2].clone()));
    let (_, stats) = g.batchnorm(x, ga, be, 1e-5).unwrap();
    let fixed = check(&ins, |g, id| {
        let b = g.batchnorm_fixed(id[0], id[1], id[2], &stats, 1e-5).unwrap();
        to_scalar(g, b, 4)
    });
    (train, fixed)
}

pub fn elementwise() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ins = [random(&[2, 3, 3], 2.0, &mut rng), random(&[2, 3, 3], 2.0, &mut rng)];
    type Op = fn(&mut Graph, NodeId, NodeId) -> NodeId;
    let ops: [(&str, Op); 7] = [
        ("relu", |g, a, _| g.relu(a)),
        ("sigmoid", |g, a, _| g.sigmoid(a)),
        ("tanh", |g, a, _| g.tanh(a)),
        ("add", |g, a, b| g.add(a, b).unwrap()),
        ("sub", |g, a, b| g.sub(a, b).unwrap()),
        ("mul", |g, a, b| g.mul(a, b).unwrap()),
        ("concat", |g, a, b| g.concat(&[a, b]).unwrap()),
    ];
    ops.iter()
        .map(|&(name, op)| {
            let e = check(&ins, |g, id| {
                let y = op(g, id[0], id[1]);
                to_scalar(g, y, 3)
            });
            (name, e)
        })
        .collect()
}

pub fn reshape_linear_mean() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ins = [random(&[2, 2, 3], 1.0, &mut rng), random(&[4, 12], 1.0, &mut rng), random(&[4], 1.0, &mut rng)];
    check(&ins, |g, id| {
        let r = g.reshape(id[0], &[12]).unwrap();
        let l = g.linear(r, id[1], id[2]).unwrap();
        let a = to_scalar(g, l, 2);
        let s = g.sigmoid(l);
        let b = to_scalar(g, s, 1);
        g.mean(&[a, b]).unwrap()
    })
}

pub fn softmax_ce() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ins = [random(&[2, 3, 4], 3.0, &mut rng)];
    let labels: Vec<u8> = (0..12).map(|i| (i % 3 == 0) as u8).collect();
    check(&ins, |g, id| g.softmax_ce(id[0], &labels).unwrap())
}

/// Two Conv-GRU steps sharing parameters.
pub fn conv_gru() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = 2;
    let mut ins = vec![random(&[c, 3, 3], 1.0, &mut rng), random(&[c, 3, 3], 0.9, &mut rng)];
    for _ in 0..3 {
        ins.push(random(&[c, c, 3, 3], 0.5, &mut rng));
        ins.push(random(&[c], 0.5, &mut rng));
        ins.push(random(&[c, c, 3, 3], 0.5, &mut rng));
    }
    check(&ins, |g, id| {
        let p = GruParams { wz: id[2], bz: id[3], uz: id[4], wr: id[5], br: id[6], ur: id[7], wh: id[8], bh: id[9], uh: id[10] };
        let h1 = conv_gru_step(g, id[0], id[1], &p, 3).unwrap();
        let h2 = conv_gru_step(g, id[0], h1, &p, 3).unwrap();
        to_scalar(g, h2, 11)
    })
}

/// Every primitive case by name.
pub fn primitives() -> Vec<(String, f64)> {
    let (bn_train, bn_fixed) = batchnorm();
    let mut out: Vec<(String, f64)> = vec![
        ("conv2d same".into(), conv2d_same()),
        ("conv2d strided".into(), conv2d_strided()),
        ("maxpool".into(), maxpool()),
        ("upconv".into(), upconv()),
        ("batchnorm train".into(), bn_train),
        ("batchnorm fixed".into(), bn_fixed),
        ("reshape/linear/mean".into(), reshape_linear_mean()),
        ("softmax ce".into(), softmax_ce()),
        ("conv-gru".into(), conv_gru()),
    ];
    out.extend(elementwise().into_iter().map(|(n, e)| (n.to_string(), e)));
    out
}

pub fn sequence(t: usize, size: usize, seed: u64) -> (CineSequence, MaskSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..t).map(|_| Image::from_fn(size, size, |_, _| rng.random_range(0.0..1.0))).collect();
    let masks = (0..t)
        .map(|k| Mask::from_fn(size, size, |y, x| u8::from((y as isize - 8).abs() + (x as isize - 7 - k as isize).abs() < 5)))
        .collect();
    (CineSequence::new(frames, (1.0, 1.0), "g").unwrap(), MaskSequence::new(masks).unwrap())
}

/// Full sequence loss (T=2, 16x16, depth 2) against every parameter tensor,
/// perturbing parameters through the network's own storage. Returns the
/// relative error of each tensor.
pub fn network(recurrent: bool) -> Vec<(String, f64)> {
    let cfg = NetworkConfig { depth: 2, base_channels: 2, recurrent, input_size: (16, 16), seed: 3, ..NetworkConfig::default() };
    let mut net = Network::build(&cfg).unwrap();
    let (seq, masks) = sequence(2, 16, 21);
    let mut sg = net.record(seq.frames(), Some(&masks), Mode::Train).unwrap();
    let loss = sg.loss.unwrap();
    sg.graph.backward(loss).unwrap();
    let analytic = net.params().grads(&mut sg.graph, &sg.params);
    let mut out = Vec::new();
    for k in 0..net.params().len() {
        let n = net.params().get(k).len();
        // large tensors: a fixed random subset of coordinates
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let coords: Vec<usize> = if n <= 24 { (0..n).collect() } else { (0..24).map(|_| rng.random_range(0..n)).collect() };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &coords {
            let orig = net.params().get(k).data()[i];
            let mut eval = |v: f64| {
                net.params_mut().get_mut(k).data_mut()[i] = v;
                let sg = net.record(seq.frames(), Some(&masks), Mode::Train).unwrap();
                sg.graph.value(sg.loss.unwrap()).item()
            };
            let num = (eval(orig + H) - eval(orig - H)) / (2.0 * H);
            net.params_mut().get_mut(k).data_mut()[i] = orig;
            let a = analytic[k][i];
            diff += (a - num) * (a - num);
            na += a * a;
            nn += num * num;
        }
        let e = if na + nn > 0.0 { diff.sqrt() / (na.sqrt() + nn.sqrt()) } else { 0.0 };
        out.push((net.params().iter().nth(k).unwrap().name.clone(), e));
    }
    out
}
