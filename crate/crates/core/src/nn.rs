//! Parameterised building blocks. A block only stores names and shapes; its
//! tensors live in a [`ParamStore`] under `<name>.<suffix>`.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{glorot_uniform, ConvGeometry, Mode, ParamStore, Session, Shape, Tensor, Var};

fn zeros_c(c: usize) -> Tensor {
    Tensor::zeros(Shape::new(1, c, 1, 1))
}

/// Plain convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub geometry: ConvGeometry,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, geometry: ConvGeometry) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            kernel,
            geometry,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let k2 = self.kernel * self.kernel;
        store.insert(
            self.weight_name(),
            glorot_uniform(
                Shape::new(self.cout, self.cin, self.kernel, self.kernel),
                self.cin * k2,
                self.cout * k2,
                rng,
            ),
        );
        store.insert(self.bias_name(), zeros_c(self.cout));
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(
            s.param(&self.weight_name())?,
            Some(s.param(&self.bias_name())?),
            self.geometry,
        )
    }
}

/// Transposed convolution with bias; weights `(cin, cout, R, R)`.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub geometry: ConvGeometry,
}

impl Deconv {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let k2 = self.kernel * self.kernel;
        store.insert(
            format!("{}.w", self.name),
            glorot_uniform(
                Shape::new(self.cin, self.cout, self.kernel, self.kernel),
                self.cin * k2,
                self.cout * k2,
                rng,
            ),
        );
        store.insert(format!("{}.b", self.name), zeros_c(self.cout));
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.transposed_conv2d(
            s.param(&format!("{}.w", self.name))?,
            Some(s.param(&format!("{}.b", self.name))?),
            self.geometry,
        )
    }
}

/// Depthwise `R×R` convolution followed by a pointwise `1×1` convolution.
#[derive(Clone, Debug)]
pub struct SepConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub geometry: ConvGeometry,
}

impl SepConv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        SepConv {
            name: name.into(),
            cin,
            cout,
            kernel,
            geometry: ConvGeometry::same(kernel),
        }
    }

    pub fn depthwise_name(&self) -> String {
        format!("{}.dw", self.name)
    }

    pub fn depthwise_bias_name(&self) -> String {
        format!("{}.db", self.name)
    }

    pub fn pointwise_name(&self) -> String {
        format!("{}.pw", self.name)
    }

    pub fn pointwise_bias_name(&self) -> String {
        format!("{}.pb", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let k2 = self.kernel * self.kernel;
        store.insert(
            self.depthwise_name(),
            glorot_uniform(Shape::new(self.cin, 1, self.kernel, self.kernel), k2, k2, rng),
        );
        store.insert(self.depthwise_bias_name(), zeros_c(self.cin));
        store.insert(
            self.pointwise_name(),
            glorot_uniform(Shape::new(self.cout, self.cin, 1, 1), self.cin, self.cout, rng),
        );
        store.insert(self.pointwise_bias_name(), zeros_c(self.cout));
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.depthwise_conv2d(
            s.param(&self.depthwise_name())?,
            Some(s.param(&self.depthwise_bias_name())?),
            self.geometry,
        )?
        .conv2d(
            s.param(&self.pointwise_name())?,
            Some(s.param(&self.pointwise_bias_name())?),
            ConvGeometry::new(1, 0),
        )
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn init(&self, store: &mut ParamStore) {
        let c = self.channels;
        store.insert(format!("{}.gamma", self.name), Tensor::ones(Shape::new(1, c, 1, 1)));
        store.insert(format!("{}.beta", self.name), zeros_c(c));
        store.insert_buffer(format!("{}.running_mean", self.name), zeros_c(c));
        store.insert_buffer(format!("{}.running_var", self.name), Tensor::ones(Shape::new(1, c, 1, 1)));
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let gamma = s.param(&format!("{}.gamma", self.name))?;
        let beta = s.param(&format!("{}.beta", self.name))?;
        match s.mode() {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(gamma, beta)?;
                s.record_bn(&self.name, stats);
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.buffer(&format!("{}.running_mean", self.name))?;
                let var = s.buffer(&format!("{}.running_var", self.name))?;
                x.batch_norm_eval(gamma, beta, mean.data(), var.data())
            }
        }
    }
}

/// conv → BN → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(name: &str, cin: usize, cout: usize, geometry: ConvGeometry) -> Self {
        ConvBlock {
            conv: Conv::new(format!("{name}.conv"), cin, cout, 3, geometry),
            bn: BatchNorm {
                name: format!("{name}.bn"),
                channels: cout,
            },
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv.init(store, rng);
        self.bn.init(store);
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.bn.forward(s, self.conv.forward(s, x)?)?.relu())
    }
}

/// Transposed conv (exact 2× upsampling) → BN → ReLU.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub deconv: Deconv,
    pub bn: BatchNorm,
}

impl UpBlock {
    pub fn new(name: &str, cin: usize, cout: usize) -> Self {
        UpBlock {
            deconv: Deconv {
                name: format!("{name}.deconv"),
                cin,
                cout,
                kernel: 3,
                geometry: ConvGeometry::up(3),
            },
            bn: BatchNorm {
                name: format!("{name}.bn"),
                channels: cout,
            },
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.deconv.init(store, rng);
        self.bn.init(store);
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.bn.forward(s, self.deconv.forward(s, x)?)?.relu())
    }
}

/// Basic residual block: `relu(bn(conv(relu(bn(conv(x))))) + x)`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: ConvBlock,
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        ResBlock {
            first: ConvBlock::new(&format!("{name}.a"), channels, channels, ConvGeometry::same(3)),
            conv: Conv::new(format!("{name}.b.conv"), channels, channels, 3, ConvGeometry::same(3)),
            bn: BatchNorm {
                name: format!("{name}.b.bn"),
                channels,
            },
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.first.init(store, rng);
        self.conv.init(store, rng);
        self.bn.init(store);
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let y = self.first.forward(s, x)?;
        let y = self.bn.forward(s, self.conv.forward(s, y)?)?;
        Ok(y.add(x)?.relu())
    }
}

/// BN → ReLU → conv, the transform applied to densely aggregated features.
#[derive(Clone, Debug)]
pub struct PreActConv {
    pub bn: BatchNorm,
    pub conv: Conv,
}

impl PreActConv {
    pub fn new(name: &str, channels: usize) -> Self {
        PreActConv {
            bn: BatchNorm {
                name: format!("{name}.bn"),
                channels,
            },
            conv: Conv::new(format!("{name}.conv"), channels, channels, 3, ConvGeometry::same(3)),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.bn.init(store);
        self.conv.init(store, rng);
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.conv.forward(s, self.bn.forward(s, x)?.relu())
    }
}
