use advseg::kernels::*;
use std::time::Instant;

fn geom(batch: usize, in_c: usize, h: usize, out_c: usize, k: usize, s: usize) -> ConvGeometry {
    ConvGeometry { batch, in_channels: in_c, in_h: h, in_w: h, out_channels: out_c,
        kernel: k, stride: s, padding: 1,
        out_h: conv_out_dim(h, k, s, 1), out_w: conv_out_dim(h, k, s, 1) }
}

fn bench(name: &str, g: &ConvGeometry, reps: usize) {
    let x = vec![0.5f32; g.batch * g.in_channels * g.in_h * g.in_w];
    let w = vec![0.01f32; g.out_channels * g.col_rows()];
    let b = vec![0.0f32; g.out_channels];
    let dy = vec![0.3f32; g.batch * g.out_channels * g.out_h * g.out_w];
    let flops_fwd = 2.0 * (g.batch * g.out_channels * g.out_h * g.out_w * g.col_rows()) as f64;

    let t = Instant::now();
    for _ in 0..reps { let _ = conv2d_forward(&x, &w, &b, g); }
    let fwd = t.elapsed().as_secs_f64() / reps as f64;

    let t = Instant::now();
    for _ in 0..reps { let _ = conv2d_backward(&x, &w, &dy, g, true, true, true); }
    let bwd = t.elapsed().as_secs_f64() / reps as f64;

    let t = Instant::now();
    for _ in 0..reps { let _ = conv2d_backward(&x, &w, &dy, g, true, false, false); }
    let bwd_dx = t.elapsed().as_secs_f64() / reps as f64;

    let t = Instant::now();
    for _ in 0..reps { let _ = conv2d_backward(&x, &w, &dy, g, false, true, false); }
    let bwd_dw = t.elapsed().as_secs_f64() / reps as f64;

    println!("{name}: fwd {:.1}ms ({:.1} GF/s) bwd_all {:.1}ms dx {:.1}ms dw {:.1}ms",
        fwd*1e3, flops_fwd/fwd/1e9, bwd*1e3, bwd_dx*1e3, bwd_dw*1e3);
}

#[test]
#[ignore]
fn profile_conv_kernels() {
    // decoder layers (k3 s1)
    bench("u0 192->64 @8", &geom(16, 192, 8, 64, 3, 1), 20);
    bench("u1 96->32 @16", &geom(16, 96, 16, 32, 3, 1), 20);
    bench("u2 48->16 @32", &geom(16, 48, 32, 16, 3, 1), 20);
    bench("u3 16->16 @64", &geom(16, 16, 64, 16, 3, 1), 20);
    bench("head 16->3 @64", &geom(16, 16, 64, 3, 3, 1), 20);
    // encoder layers (k4 s2)
    bench("d1 3->16 @64", &geom(16, 3, 64, 16, 4, 2), 20);
    bench("d2 16->32 @32", &geom(16, 16, 32, 32, 4, 2), 20);
    bench("d3 32->64 @16", &geom(16, 32, 16, 64, 4, 2), 20);
    bench("d4 64->128 @8", &geom(16, 64, 8, 128, 4, 2), 20);
}
