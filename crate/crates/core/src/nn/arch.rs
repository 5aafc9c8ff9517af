use crate::error::{Error, Result};

/// One layer of a sequential CNN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Valid stride-1 convolution with `out_channels` filters of `kernel×kernel×in_channels`.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    /// Non-overlapping max-pool; trailing rows/columns that do not fill a window are dropped.
    MaxPool { size: usize },
    /// Fully connected layer; a 3-D input is flattened in row-major order.
    Dense { inputs: usize, outputs: usize },
}

impl LayerSpec {
    pub fn kind_code(&self) -> u8 {
        match self {
            LayerSpec::Conv { .. } => 0,
            LayerSpec::Relu => 1,
            LayerSpec::MaxPool { .. } => 2,
            LayerSpec::Dense { .. } => 3,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

/// Input extents plus the layer stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    /// Input `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Reference desk-scale network for 28×28 single-channel images:
    /// conv3×3(1→8) · relu · pool2 · conv3×3(8→16) · relu · pool2 · conv5×5(16→16) · relu · fc(16→10).
    pub fn paper_net() -> Self {
        Self {
            input: [1, 28, 28],
            layers: vec![
                LayerSpec::Conv { in_channels: 1, out_channels: 8, kernel: 3, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv { in_channels: 8, out_channels: 16, kernel: 3, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv { in_channels: 16, out_channels: 16, kernel: 5, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 16, outputs: 10 },
            ],
        }
    }

    /// Shape of each layer's input, plus the final output shape, as
    /// `[C, H, W]` (dense outputs are `[K, 1, 1]`).
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = vec![self.input];
        let mut cur = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, stride } => {
                    if stride != 1 {
                        return Err(Error::Unsupported(format!("layer {i}: only stride-1 convolutions")));
                    }
                    if cur[0] != in_channels || cur[1] < kernel || cur[2] < kernel || kernel == 0 {
                        return Err(Error::dim("Architecture conv", (in_channels, kernel), cur));
                    }
                    [out_channels, cur[1] - kernel + 1, cur[2] - kernel + 1]
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { size } => {
                    if size == 0 || cur[1] < size || cur[2] < size {
                        return Err(Error::dim("Architecture maxpool", size, cur));
                    }
                    [cur[0], cur[1] / size, cur[2] / size]
                }
                LayerSpec::Dense { inputs, outputs } => {
                    if cur.iter().product::<usize>() != inputs {
                        return Err(Error::dim("Architecture dense", inputs, cur));
                    }
                    [outputs, 1, 1]
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> Result<usize> {
        match self.layers.last() {
            Some(LayerSpec::Dense { outputs, .. }) => Ok(*outputs),
            _ => Err(Error::InvalidArgument("architecture must end in a dense layer".into())),
        }
    }

    /// Indices of convolution layers.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of layers that carry weights (conv and dense).
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn kernel(&self, layer: usize) -> Option<usize> {
        match self.layers.get(layer) {
            Some(LayerSpec::Conv { kernel, .. }) => Some(*kernel),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_net_shapes() {
        let s = Architecture::paper_net().shapes().unwrap();
        assert_eq!(s[1], [8, 26, 26]);
        assert_eq!(s[3], [8, 13, 13]);
        assert_eq!(s[4], [16, 11, 11]);
        assert_eq!(s[6], [16, 5, 5]);
        assert_eq!(s[7], [16, 1, 1]);
        assert_eq!(*s.last().unwrap(), [10, 1, 1]);
        assert_eq!(Architecture::paper_net().conv_layers(), vec![0, 3, 6]);
    }

    #[test]
    fn rejects_bad_dense_width() {
        let mut a = Architecture::paper_net();
        a.layers[8] = LayerSpec::Dense { inputs: 17, outputs: 10 };
        assert!(a.shapes().is_err());
    }

    #[test]
    fn rejects_strided_conv() {
        let mut a = Architecture::paper_net();
        a.layers[0] = LayerSpec::Conv { in_channels: 1, out_channels: 8, kernel: 3, stride: 2 };
        assert!(matches!(a.shapes(), Err(Error::Unsupported(_))));
    }
}
