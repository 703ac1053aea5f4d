use lcrnet::ops::{conv2d, global_avg_pool, maxpool_to, ConvKernel};
use lcrnet::tensor::{activation, group_norm, Activation, GroupNormParams, Shape, Tensor};
use std::time::Instant;

fn bench(name: &str, mut f: impl FnMut()) {
    let t0 = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        f();
    }
    println!("{name}: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}

fn main() {
    // stage-1 sized tensor of the criterion-7 run
    let x = Tensor::<f32>::full(Shape::new(8, 16, 64, 64), 0.37);
    println!("tensor: 8x16x64x64 = {} elements", x.len());
    bench("silu     ", || {
        let _ = activation(&x, Activation::Silu);
    });
    bench("sigmoid  ", || {
        let _ = activation(&x, Activation::Sigmoid);
    });
    bench("relu     ", || {
        let _ = activation(&x, Activation::Relu);
    });
    let gn = GroupNormParams::<f32>::identity(16, 4);
    bench("groupnorm", || {
        let _ = group_norm(&x, &gn).unwrap();
    });
    bench("maxpool/2", || {
        let _ = maxpool_to(&x, 32, 32).unwrap();
    });
    bench("gap      ", || {
        let _ = global_avg_pool(&x);
    });
    bench("clone    ", || {
        let _ = x.clone();
    });
    let wd = Tensor::<f32>::full(Shape::new(16, 1, 3, 3), 0.1);
    let kd = ConvKernel::new(wd, None, 1, 1, 16).unwrap();
    bench("dw 3x3   ", || {
        let _ = conv2d(&x, &kd).unwrap();
    });
    let wp = Tensor::<f32>::full(Shape::new(16, 16, 1, 1), 0.1);
    let kp = ConvKernel::new(wp, None, 1, 1, 1).unwrap();
    bench("pw 16->16", || {
        let _ = conv2d(&x, &kp).unwrap();
    });
}
