//! Per-example routing weights of a conditional convolution, and the check
//! that uniform routing is the same as convolving with the mean kernel.

use candle_core::{DType, Device, Tensor};
use splicenet::fusion::CondConv;
use splicenet::params::ParamStore;

fn main() -> splicenet::Result<()> {
    let dev = Device::Cpu;
    let store = ParamStore::new(7, DType::F64, dev.clone());
    let k = 4;
    let cc = CondConv::new(&store.root(), 8, 8, 3, k)?;
    cc.router_weight().set(&Tensor::randn(0f64, 1.0, (k, 8), &dev)?)?;
    let x = Tensor::randn(0f64, 1.0, (3, 8, 16, 16), &dev)?;
    let x = x.broadcast_add(&Tensor::new(&[-1f64, 0.0, 1.0], &dev)?.reshape((3, 1, 1, 1))?)?;
    let r = cc.routing(&x)?.to_vec2::<f64>()?;
    for (b, row) in r.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("example {b}: routing [{}]", cells.join(", "));
    }
    let uniform = Tensor::full(1.0 / k as f64, (3, k), &dev)?;
    let routed = cc.forward_routed(&x, &uniform)?;
    let mean_w = cc.experts().as_tensor().mean(0)?;
    let mean_b = cc.expert_bias().as_tensor().mean(0)?;
    let diff = (routed - cc.plain(&x, &mean_w, &mean_b)?)?.abs()?.max_all()?.to_scalar::<f64>()?;
    println!("uniform routing vs mean kernel: max abs diff {diff:.2e}");
    Ok(())
}
