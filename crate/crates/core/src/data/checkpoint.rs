//! Container (de)serialization for network components and normalizers.
//! Every numeric value is stored as a raw array, so checkpoints round-trip
//! bit-exactly; structural metadata is stored as u32 arrays.

use super::container::Container;
use super::normalize::Normalizer;
use super::DataError;
use crate::encoding::{EncoderScale, FreqMatrix, MultiscaleEncoder};
use crate::field::{Activation, Hypernetwork, Linear, NeuralField, ResidualMlp};

fn u32_scalar(c: &Container, name: &str) -> Result<u32, DataError> {
    let v = c.u32s(name)?;
    if v.len() != 1 {
        return Err(DataError::Invalid(format!("{name}: expected one value")));
    }
    Ok(v[0])
}

fn push_u64(c: &mut Container, name: String, v: u64) -> Result<(), DataError> {
    c.push_u32(name, vec![2], vec![(v & 0xFFFF_FFFF) as u32, (v >> 32) as u32])
}

fn get_u64(c: &Container, name: &str) -> Result<u64, DataError> {
    let v = c.u32s(name)?;
    if v.len() != 2 {
        return Err(DataError::Invalid(format!("{name}: expected two u32 halves")));
    }
    Ok(u64::from(v[0]) | (u64::from(v[1]) << 32))
}

fn activation_tag(a: Activation) -> u32 {
    match a {
        Activation::Relu => 0,
        Activation::Silu => 1,
    }
}

fn activation_from(tag: u32) -> Result<Activation, DataError> {
    match tag {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Silu),
        t => Err(DataError::Invalid(format!("unknown activation tag {t}"))),
    }
}

pub fn put_linears(c: &mut Container, prefix: &str, layers: &[Linear]) -> Result<(), DataError> {
    c.push_u32(format!("{prefix}/count"), vec![1], vec![layers.len() as u32])?;
    for (i, l) in layers.iter().enumerate() {
        c.push_tensor(format!("{prefix}/{i}/w"), &l.w)?;
        c.push_tensor(format!("{prefix}/{i}/b"), &l.b)?;
    }
    Ok(())
}

pub fn get_linears(c: &Container, prefix: &str) -> Result<Vec<Linear>, DataError> {
    let count = u32_scalar(c, &format!("{prefix}/count"))? as usize;
    (0..count)
        .map(|i| {
            Ok(Linear {
                w: c.tensor(&format!("{prefix}/{i}/w"))?,
                b: c.tensor(&format!("{prefix}/{i}/b"))?,
            })
        })
        .collect()
}

pub fn put_encoder(
    c: &mut Container,
    prefix: &str,
    enc: &MultiscaleEncoder,
) -> Result<(), DataError> {
    c.push_u32(format!("{prefix}/scales"), vec![1], vec![enc.num_scales() as u32])?;
    for (i, s) in enc.scales().iter().enumerate() {
        match s {
            EncoderScale::Fourier(fm) => {
                c.push_u32(format!("{prefix}/{i}/kind"), vec![1], vec![0])?;
                c.push_tensor(format!("{prefix}/{i}/b"), fm.matrix())?;
                c.push_f64(format!("{prefix}/{i}/sigma"), vec![1], vec![fm.sigma()])?;
                push_u64(c, format!("{prefix}/{i}/seed"), fm.seed())?;
            }
            EncoderScale::Identity { dim } => {
                c.push_u32(format!("{prefix}/{i}/kind"), vec![1], vec![1])?;
                c.push_u32(format!("{prefix}/{i}/dim"), vec![1], vec![*dim as u32])?;
            }
        }
    }
    Ok(())
}

pub fn get_encoder(c: &Container, prefix: &str) -> Result<MultiscaleEncoder, DataError> {
    let n = u32_scalar(c, &format!("{prefix}/scales"))? as usize;
    let mut scales = Vec::with_capacity(n);
    for i in 0..n {
        let kind = u32_scalar(c, &format!("{prefix}/{i}/kind"))?;
        match kind {
            0 => {
                let b = c.tensor(&format!("{prefix}/{i}/b"))?;
                let sigma = c.tensor(&format!("{prefix}/{i}/sigma"))?.item();
                let seed = get_u64(c, &format!("{prefix}/{i}/seed"))?;
                let fm = FreqMatrix::from_matrix(b, sigma, seed)
                    .map_err(|e| DataError::Invalid(e.to_string()))?;
                scales.push(EncoderScale::Fourier(fm));
            }
            1 => {
                let dim = u32_scalar(c, &format!("{prefix}/{i}/dim"))? as usize;
                scales.push(EncoderScale::Identity { dim });
            }
            t => return Err(DataError::Invalid(format!("unknown encoder scale kind {t}"))),
        }
    }
    MultiscaleEncoder::new(scales).map_err(|e| DataError::Invalid(e.to_string()))
}

pub fn put_field(c: &mut Container, prefix: &str, field: &NeuralField) -> Result<(), DataError> {
    put_encoder(c, &format!("{prefix}/encoder"), &field.encoder)?;
    put_linears(c, &format!("{prefix}/hidden"), &field.hidden)?;
    c.push_tensor(format!("{prefix}/out/w"), &field.output.w)?;
    c.push_tensor(format!("{prefix}/out/b"), &field.output.b)?;
    Ok(())
}

pub fn get_field(c: &Container, prefix: &str) -> Result<NeuralField, DataError> {
    Ok(NeuralField {
        encoder: get_encoder(c, &format!("{prefix}/encoder"))?,
        hidden: get_linears(c, &format!("{prefix}/hidden"))?,
        output: Linear {
            w: c.tensor(&format!("{prefix}/out/w"))?,
            b: c.tensor(&format!("{prefix}/out/b"))?,
        },
    })
}

pub fn put_hypernet(c: &mut Container, prefix: &str, h: &Hypernetwork) -> Result<(), DataError> {
    put_linears(c, &format!("{prefix}/layers"), &h.layers)?;
    c.push_u32(
        format!("{prefix}/mod_widths"),
        vec![h.mod_widths().len()],
        h.mod_widths().iter().map(|&w| w as u32).collect(),
    )?;
    c.push_u32(format!("{prefix}/activation"), vec![1], vec![activation_tag(h.activation)])?;
    Ok(())
}

pub fn get_hypernet(c: &Container, prefix: &str) -> Result<Hypernetwork, DataError> {
    let layers = get_linears(c, &format!("{prefix}/layers"))?;
    let mod_widths: Vec<usize> = c
        .u32s(&format!("{prefix}/mod_widths"))?
        .iter()
        .map(|&w| w as usize)
        .collect();
    let activation = activation_from(u32_scalar(c, &format!("{prefix}/activation"))?)?;
    let input_dim = layers[0].in_dim();
    let mut h = Hypernetwork::init(input_dim, &[], mod_widths, activation, 0);
    h.layers = layers;
    Ok(h)
}

pub fn put_mlp(c: &mut Container, prefix: &str, m: &ResidualMlp) -> Result<(), DataError> {
    put_linears(c, &format!("{prefix}/layers"), &m.layers)?;
    c.push_u32(format!("{prefix}/activation"), vec![1], vec![activation_tag(m.activation)])?;
    Ok(())
}

pub fn get_mlp(c: &Container, prefix: &str) -> Result<ResidualMlp, DataError> {
    Ok(ResidualMlp {
        layers: get_linears(c, &format!("{prefix}/layers"))?,
        activation: activation_from(u32_scalar(c, &format!("{prefix}/activation"))?)?,
    })
}

pub fn put_normalizer(c: &mut Container, prefix: &str, n: &Normalizer) -> Result<(), DataError> {
    c.push_f64(format!("{prefix}/mean"), vec![n.mean.len()], n.mean.clone())?;
    c.push_f64(format!("{prefix}/std"), vec![n.std.len()], n.std.clone())?;
    c.push_u32(
        format!("{prefix}/constant"),
        vec![n.constant_features.len()],
        n.constant_features.iter().map(|&i| i as u32).collect(),
    )?;
    Ok(())
}

pub fn get_normalizer(c: &Container, prefix: &str) -> Result<Normalizer, DataError> {
    Ok(Normalizer {
        mean: c.tensor(&format!("{prefix}/mean"))?.data().to_vec(),
        std: c.tensor(&format!("{prefix}/std"))?.data().to_vec(),
        constant_features: c
            .u32s(&format!("{prefix}/constant"))?
            .iter()
            .map(|&i| i as usize)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn field_checkpoint_round_trip_is_bit_exact() {
        let enc = MultiscaleEncoder::gaussian(6, 2, &[1.0, 5.0], 99).unwrap();
        let field = NeuralField::init(enc, &[5, 5], 2, 100).unwrap();
        let mut c = Container::new();
        put_field(&mut c, "field", &field).unwrap();
        let back = get_field(&Container::from_bytes(&c.to_bytes()).unwrap(), "field").unwrap();
        assert_eq!(back, field);
        // Outputs are bit-identical before/after.
        let phis: Vec<Tensor> =
            field.modulation_widths().iter().map(|&w| Tensor::filled(&[w], 0.1)).collect();
        let x = [0.3, -0.7];
        let a = field.forward(&x, &phis).unwrap();
        let b = back.forward(&x, &phis).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn hypernet_and_mlp_round_trip() {
        let h = Hypernetwork::init(3, &[7], vec![5, 5], Activation::Relu, 4);
        let m = ResidualMlp::init(&[4, 8, 8, 2], Activation::Silu, 5);
        let mut c = Container::new();
        put_hypernet(&mut c, "h", &h).unwrap();
        put_mlp(&mut c, "m", &m).unwrap();
        let c2 = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(get_hypernet(&c2, "h").unwrap(), h);
        assert_eq!(get_mlp(&c2, "m").unwrap(), m);
    }

    #[test]
    fn normalizer_round_trip() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let n = Normalizer::fit([&x]).unwrap();
        let mut c = Container::new();
        put_normalizer(&mut c, "n", &n).unwrap();
        assert_eq!(get_normalizer(&c, "n").unwrap(), n);
    }
}
