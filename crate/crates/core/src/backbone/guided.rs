use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

/// Rectifier whose gradient is passed back only where both the input and the
/// upstream gradient are positive.
#[derive(Clone, Copy, Debug, Default)]
pub struct GuidedRelu;

fn relu_slice<T: Copy + PartialOrd + Default>(src: &[T]) -> Vec<T> {
    let zero = T::default();
    src.iter().map(|&v| if v > zero { v } else { zero }).collect()
}

impl CustomOp1 for GuidedRelu {
    fn name(&self) -> &'static str {
        "guided-relu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("guided-relu needs a contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(relu_slice(&v[start..end])),
            CpuStorage::F64(v) => CpuStorage::F64(relu_slice(&v[start..end])),
            _ => return Err(candle_core::Error::Msg("guided-relu supports f32 and f64 only".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let active = arg.gt(0.0)?.to_dtype(arg.dtype())?;
        Ok(Some(grad_res.relu()?.mul(&active)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn forward_is_relu_backward_is_gated_twice() {
        let x = Var::new(&[-1.0f32, 2.0, 3.0, -4.0, 0.5], &Device::Cpu).unwrap();
        let y = x.as_tensor().apply_op1(GuidedRelu).unwrap();
        assert_eq!(y.to_vec1::<f32>().unwrap(), vec![0.0, 2.0, 3.0, 0.0, 0.5]);
        let w = Tensor::new(&[5.0f32, -1.0, 2.0, 7.0, 1.0], &Device::Cpu).unwrap();
        let grads = (y * w).unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(x.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(g, vec![0.0, 0.0, 2.0, 0.0, 1.0]);
    }
}
