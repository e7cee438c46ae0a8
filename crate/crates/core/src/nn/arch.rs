use super::{NnError, ParamSet, Tensor};
use crate::rng::CounterRng;

pub const KERNEL: usize = 3;

/// 3x3 convolution, stride 1, zero padding 1, followed by ReLU and 2x2 max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
}

/// Fully connected layer; ReLU follows every dense layer except the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseSpec {
    pub out_features: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Convolution stack.
    Feature,
    /// Dense head.
    Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EntrySpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub group: ParamGroup,
    pub is_bias: bool,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Fixed layer layout of the inspection network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub side: usize,
    pub in_channels: usize,
    pub convs: Vec<ConvSpec>,
    pub dense: Vec<DenseSpec>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self::inspection_cnn()
    }
}

impl Architecture {
    /// 16x16x1 input, conv(4) -> pool -> conv(8) -> pool -> dense(64) -> dense(4).
    pub fn inspection_cnn() -> Self {
        Self {
            side: 16,
            in_channels: 1,
            convs: vec![ConvSpec { out_channels: 4 }, ConvSpec { out_channels: 8 }],
            dense: vec![DenseSpec { out_features: 64 }, DenseSpec { out_features: 4 }],
        }
    }

    pub fn id(&self) -> String {
        let convs: Vec<String> = self.convs.iter().map(|c| c.out_channels.to_string()).collect();
        let dense: Vec<String> = self.dense.iter().map(|d| d.out_features.to_string()).collect();
        format!(
            "cnn-{}x{}x{}-c{}-d{}",
            self.side,
            self.side,
            self.in_channels,
            convs.join("."),
            dense.join(".")
        )
    }

    pub fn input_len(&self) -> usize {
        self.side * self.side * self.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.dense.last().map(|d| d.out_features).unwrap_or(0)
    }

    /// Side length of the feature map after all conv/pool stages.
    pub fn feature_side(&self) -> usize {
        self.side >> self.convs.len()
    }

    pub fn flat_features(&self) -> usize {
        let ch = self.convs.last().map(|c| c.out_channels).unwrap_or(self.in_channels);
        ch * self.feature_side() * self.feature_side()
    }

    pub(crate) fn entries(&self) -> Vec<EntrySpec> {
        let mut out = Vec::new();
        let mut in_ch = self.in_channels;
        for (i, conv) in self.convs.iter().enumerate() {
            let k2 = KERNEL * KERNEL;
            out.push(EntrySpec {
                name: format!("conv{}.weight", i + 1),
                dims: vec![conv.out_channels, in_ch, KERNEL, KERNEL],
                group: ParamGroup::Feature,
                is_bias: false,
                fan_in: in_ch * k2,
                fan_out: conv.out_channels * k2,
            });
            out.push(EntrySpec {
                name: format!("conv{}.bias", i + 1),
                dims: vec![conv.out_channels],
                group: ParamGroup::Feature,
                is_bias: true,
                fan_in: in_ch * k2,
                fan_out: conv.out_channels * k2,
            });
            in_ch = conv.out_channels;
        }
        let mut in_features = self.flat_features();
        for (i, dense) in self.dense.iter().enumerate() {
            out.push(EntrySpec {
                name: format!("fc{}.weight", i + 1),
                dims: vec![dense.out_features, in_features],
                group: ParamGroup::Classifier,
                is_bias: false,
                fan_in: in_features,
                fan_out: dense.out_features,
            });
            out.push(EntrySpec {
                name: format!("fc{}.bias", i + 1),
                dims: vec![dense.out_features],
                group: ParamGroup::Classifier,
                is_bias: true,
                fan_in: in_features,
                fan_out: dense.out_features,
            });
            in_features = dense.out_features;
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.entries().into_iter().map(|e| e.name).collect()
    }

    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.entries()
            .into_iter()
            .filter(|e| e.group == group)
            .map(|e| e.name)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.entries().iter().map(|e| e.dims.iter().product::<usize>()).sum()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.convs.is_empty() || self.dense.is_empty() {
            return Err(NnError::Precondition("need at least one conv and one dense layer".into()));
        }
        if self.side == 0 || self.side % (1 << self.convs.len()) != 0 {
            return Err(NnError::Precondition(format!(
                "side {} not divisible by 2^{}",
                self.side,
                self.convs.len()
            )));
        }
        if self.in_channels == 0
            || self.convs.iter().any(|c| c.out_channels == 0)
            || self.dense.iter().any(|d| d.out_features == 0)
        {
            return Err(NnError::Precondition("zero-width layer".into()));
        }
        Ok(())
    }

    /// Errors unless `params` has exactly this architecture's names, order and dims.
    pub fn check(&self, params: &ParamSet) -> Result<(), NnError> {
        let entries = self.entries();
        let ok = entries.len() == params.len()
            && entries
                .iter()
                .zip(params.iter())
                .all(|(e, (name, t))| e.name == name && e.dims == t.dims());
        if ok {
            Ok(())
        } else {
            Err(NnError::ArchitectureMismatch(format!(
                "parameters do not match architecture {}",
                self.id()
            )))
        }
    }

    pub fn zeros(&self) -> ParamSet {
        let entries = self
            .entries()
            .into_iter()
            .map(|e| (e.name, Tensor::zeros(e.dims)))
            .collect();
        ParamSet::new(entries).expect("architecture names are unique")
    }

    /// Glorot-uniform weights, zero biases. Entry `i` draws from counter stream `i`
    /// of `seed`, so the result depends only on `(self, seed)`.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let entries = self
            .entries()
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let n: usize = e.dims.iter().product();
                let data = if e.is_bias {
                    vec![0.0; n]
                } else {
                    let limit = (6.0 / (e.fan_in + e.fan_out) as f64).sqrt();
                    let mut rng = CounterRng::stream(seed, i as u64);
                    (0..n).map(|_| rng.uniform(-limit, limit)).collect()
                };
                (e.name, Tensor::new(e.dims, data).expect("dims match data"))
            })
            .collect();
        ParamSet::new(entries).expect("architecture names are unique")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_of_inspection_cnn() {
        let a = Architecture::inspection_cnn();
        a.validate().unwrap();
        assert_eq!(a.num_classes(), 4);
        assert_eq!(a.flat_features(), 8 * 4 * 4);
        assert_eq!(
            a.param_names(),
            vec![
                "conv1.weight",
                "conv1.bias",
                "conv2.weight",
                "conv2.bias",
                "fc1.weight",
                "fc1.bias",
                "fc2.weight",
                "fc2.bias"
            ]
        );
        assert_eq!(a.num_params(), 36 + 4 + 288 + 8 + 64 * 128 + 64 + 4 * 64 + 4);
    }

    #[test]
    fn groups_partition_names() {
        let a = Architecture::inspection_cnn();
        let mut f = a.group_names(ParamGroup::Feature);
        let c = a.group_names(ParamGroup::Classifier);
        assert!(f.iter().all(|n| !c.contains(n)));
        f.extend(c);
        f.sort();
        let mut all = a.param_names();
        all.sort();
        assert_eq!(f, all);
    }

    #[test]
    fn init_is_pure_function_of_seed() {
        let a = Architecture::inspection_cnn();
        assert!(a.init_params(42).bit_eq(&a.init_params(42)));
        assert!(!a.init_params(42).bit_eq(&a.init_params(43)));
    }

    #[test]
    fn init_biases_zero_and_weights_bounded() {
        let a = Architecture::inspection_cnn();
        let p = a.init_params(5);
        for (e, (name, t)) in a.entries().iter().zip(p.iter()) {
            assert_eq!(e.name, name);
            if e.is_bias {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let limit = (6.0 / (e.fan_in + e.fan_out) as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= limit));
                assert!(t.data().iter().any(|&v| v != 0.0));
            }
        }
        a.check(&p).unwrap();
    }

    #[test]
    fn check_rejects_foreign_layout() {
        let a = Architecture::inspection_cnn();
        let p = a.init_params(1);
        let head = p.select(["fc2.weight", "fc2.bias"]).unwrap();
        assert!(a.check(&head).is_err());
    }
}
