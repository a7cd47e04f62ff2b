use std::time::Instant;
use vad_core::conv::{conv2d_fwd, conv2d_bwd_input, conv2d_bwd_kernel, conv_out_size, ConvDims};

fn dims(batch: usize, in_ch: usize, hw: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> ConvDims {
    ConvDims {
        batch, in_ch, in_h: hw, in_w: hw, out_ch, kh: k, kw: k, stride, pad,
        out_h: conv_out_size(hw, k, stride, pad).unwrap(),
        out_w: conv_out_size(hw, k, stride, pad).unwrap(),
    }
}

fn bench(name: &str, d: &ConvDims, iters: usize) {
    let x = vec![0.5f32; d.batch * d.in_ch * d.in_h * d.in_w];
    let k = vec![0.1f32; d.out_ch * d.in_ch * d.kh * d.kw];
    let g = vec![0.2f32; d.batch * d.out_ch * d.out_h * d.out_w];
    let macs = (d.batch * d.out_ch * d.out_h * d.out_w * d.in_ch * d.kh * d.kw) as f64;
    let t = Instant::now();
    for _ in 0..iters { std::hint::black_box(conv2d_fwd(&x, &k, d)); }
    let fwd = t.elapsed().as_secs_f64() / iters as f64;
    let t = Instant::now();
    for _ in 0..iters { std::hint::black_box(conv2d_bwd_input(&g, &k, d)); }
    let bwi = t.elapsed().as_secs_f64() / iters as f64;
    let t = Instant::now();
    for _ in 0..iters { std::hint::black_box(conv2d_bwd_kernel(&g, &x, d)); }
    let bwk = t.elapsed().as_secs_f64() / iters as f64;
    println!("{name}: fwd {:.2} GMAC/s, bwd_in {:.2}, bwd_k {:.2}", macs/fwd/1e9, macs/bwi/1e9, macs/bwk/1e9);
}

fn main() {
    bench("b8 c6->32 32x32 k3s1", &dims(8, 6, 32, 32, 3, 1, 1), 20);
    bench("b8 c32->64 32x32 k4s2", &dims(8, 32, 32, 64, 4, 2, 1), 10);
    bench("b8 c64->128 16x16 k4s2", &dims(8, 64, 16, 128, 4, 2, 1), 10);
    bench("b8 c256->128 8x8 k3s1", &dims(8, 256, 8, 128, 3, 1, 1), 10);
}
