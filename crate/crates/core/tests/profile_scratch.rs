use advseg::graph::Graph;
use advseg::layers::ParamMode;
use advseg::models::{build_segmentor, build_critic, segmentor_forward, critic_features, NetSpec};
use advseg::tensor::Tensor;
use std::time::Instant;

#[test]
#[ignore]
fn profile_components() {
    let seg = build_segmentor::<f32>(&NetSpec::segmentor(3, 3).with_base(16), 1).unwrap();
    let critic = build_critic::<f32>(&NetSpec::critic(3).with_base(16), 2).unwrap();
    let x = Tensor::<f32>::full(&[16, 3, 64, 64], 0.3);

    // Warmup
    for _ in 0..2 {
        let mut g = Graph::new();
        let xid = g.leaf(&x);
        let _ = segmentor_forward(&mut g, &seg, xid, ParamMode::Frozen).unwrap();
    }

    let t = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let mut g = Graph::new();
        let xid = g.leaf(&x);
        let _ = segmentor_forward(&mut g, &seg, xid, ParamMode::Frozen).unwrap();
    }
    println!("seg fwd frozen: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xid = g.leaf(&x);
        let pred = segmentor_forward(&mut g, &seg, xid, ParamMode::Trainable).unwrap();
        let c = g.constant(&[16,3,64,64], vec![0.0; 16*3*64*64]).unwrap();
        let loss = g.mean_abs(pred, c).unwrap();
        g.backward(loss).unwrap();
    }
    println!("seg fwd+bwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let xm = Tensor::<f32>::full(&[16, 3, 64, 64], 0.2);
    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let a = g.leaf(&xm);
        let _ = critic_features(&mut g, &critic, a, ParamMode::Frozen).unwrap();
    }
    println!("critic fwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let a = g.leaf(&xm);
        let feats = critic_features(&mut g, &critic, a, ParamMode::Trainable).unwrap();
        let shape = g.shape(feats.layers[3]).to_vec();
        let n: usize = shape.iter().product();
        let c = g.constant(&shape, vec![0.0; n]).unwrap();
        let loss = g.mean_abs(feats.layers[3], c).unwrap();
        g.backward(loss).unwrap();
    }
    println!("critic fwd+bwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
