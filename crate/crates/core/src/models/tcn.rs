use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    fit_sequence_net, fit_standardizer_once, open_checkpoint, predict_sequence_net, read_params,
    read_standardizer, sequence_tensor, to_dof, write_params, write_standardizer, InputSpec, ModelError,
    ModelKind, NetBatch, Regressor, SequenceNet, SequenceSet, TrainOptions, TrainReport,
};
use crate::kinematics::DofVector;
use crate::neural::{
    mse_loss, relu_backward, relu_in_place, sigmoid, CausalConv1d, Dense, Differentiable, NeuralError, Param,
    Tensor2,
};
use crate::signal::{FeatureSequence, Standardizer};
use crate::storage::checkpoint::{self, ByteWriter};
use crate::DOF;

/// Residual stack of causal dilated convolutions. Every block applies two
/// convolutions of the same dilation, so the receptive field is
/// `1 + 2 * sum_b (kernel - 1) * dilation_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    pub filters: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub dropout: f64,
    pub seq_len: usize,
    pub window_ms: u32,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self { filters: 128, kernel: 3, dilations: vec![1, 2, 4, 8], dropout: 0.25, seq_len: 40, window_ms: 50 }
    }
}

impl TcnConfig {
    pub fn receptive_field(&self) -> usize {
        1 + 2 * self.dilations.iter().map(|d| (self.kernel - 1) * d).sum::<usize>()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.filters == 0 || self.kernel == 0 || self.dilations.is_empty() || self.seq_len == 0 {
            return Err(ModelError::InvalidConfig(format!("{self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {}", self.dropout)));
        }
        if self.receptive_field() < self.seq_len {
            return Err(ModelError::InvalidConfig(format!(
                "receptive field {} shorter than sequence length {}",
                self.receptive_field(),
                self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnBlock {
    pub conv1: CausalConv1d,
    pub conv2: CausalConv1d,
    /// 1x1 projection of the residual when channel counts differ.
    pub down: Option<Dense>,
}

struct BlockCache {
    x: Tensor2,
    cols1: Tensor2,
    a1: Tensor2,
    mask1: Option<Vec<f64>>,
    cols2: Tensor2,
    a2: Tensor2,
    mask2: Option<Vec<f64>>,
    out: Tensor2,
}

fn dropout_mask(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

fn apply_mask(x: &mut Tensor2, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        x.data.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
    }
}

impl TcnBlock {
    fn forward(
        &self,
        x: Tensor2,
        len: usize,
        dropout: f64,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<BlockCache, NeuralError> {
        let (mut a1, cols1) = self.conv1.forward(&x, len)?;
        relu_in_place(&mut a1);
        let mask1 = rng.as_deref_mut().filter(|_| dropout > 0.0).map(|r| dropout_mask(a1.data.len(), dropout, r));
        let mut d1 = a1.clone();
        apply_mask(&mut d1, &mask1);

        let (mut a2, cols2) = self.conv2.forward(&d1, len)?;
        relu_in_place(&mut a2);
        let mask2 = rng.as_deref_mut().filter(|_| dropout > 0.0).map(|r| dropout_mask(a2.data.len(), dropout, r));
        let mut out = a2.clone();
        apply_mask(&mut out, &mask2);

        match &self.down {
            Some(d) => {
                let res = d.forward(&x)?;
                out.data.iter_mut().zip(&res.data).for_each(|(o, r)| *o += r);
            }
            None => out.data.iter_mut().zip(&x.data).for_each(|(o, r)| *o += r),
        }
        relu_in_place(&mut out);
        Ok(BlockCache { x, cols1, a1, mask1, cols2, a2, mask2, out })
    }

    fn backward(&mut self, cache: &BlockCache, dout: &Tensor2, len: usize) -> Tensor2 {
        let mut dsum = dout.clone();
        relu_backward(&cache.out, &mut dsum);

        let mut da2 = dsum.clone();
        apply_mask(&mut da2, &cache.mask2);
        relu_backward(&cache.a2, &mut da2);
        let mut dd1 = self.conv2.backward(&cache.cols2, &da2, len);
        apply_mask(&mut dd1, &cache.mask1);
        relu_backward(&cache.a1, &mut dd1);
        let mut dx = self.conv1.backward(&cache.cols1, &dd1, len);

        match &mut self.down {
            Some(d) => {
                let dres = d.backward(&cache.x, &dsum);
                dx.data.iter_mut().zip(&dres.data).for_each(|(a, b)| *a += b);
            }
            None => dx.data.iter_mut().zip(&dsum.data).for_each(|(a, b)| *a += b),
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        if let Some(d) = &mut self.down {
            p.extend(d.params_mut());
        }
        p
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.conv1.w, &self.conv1.b, &self.conv2.w, &self.conv2.b];
        if let Some(d) = &self.down {
            p.extend([&d.w, &d.b]);
        }
        p
    }
}

/// Temporal convolutional network: residual causal blocks, the last
/// timestep's representation, a dense layer and a sigmoid per DoF.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnNet {
    pub input_dim: usize,
    pub dropout: f64,
    pub blocks: Vec<TcnBlock>,
    pub head: Dense,
}

impl TcnNet {
    pub fn new(cfg: &TcnConfig, input_dim: usize, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(cfg.dilations.len());
        let mut cin = input_dim;
        for &d in &cfg.dilations {
            let conv1 = CausalConv1d::new(cin, cfg.filters, cfg.kernel, d, &mut rng);
            let conv2 = CausalConv1d::new(cfg.filters, cfg.filters, cfg.kernel, d, &mut rng);
            let down = (cin != cfg.filters).then(|| Dense::new(cin, cfg.filters, &mut rng));
            blocks.push(TcnBlock { conv1, conv2, down });
            cin = cfg.filters;
        }
        let head = Dense::new(cfg.filters, DOF, &mut rng);
        Ok(Self { input_dim, dropout: cfg.dropout, blocks, head })
    }

    fn run(
        &self,
        x: &Tensor2,
        len: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<BlockCache>, Tensor2, Tensor2), NeuralError> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            let cache = block.forward(h, len, self.dropout, &mut rng)?;
            h = cache.out.clone();
            caches.push(cache);
        }
        let batch = h.rows / len;
        let mut last = Tensor2::zeros(batch, h.cols);
        for b in 0..batch {
            last.row_mut(b).copy_from_slice(h.row(b * len + len - 1));
        }
        let mut y = self.head.forward(&last)?;
        y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok((caches, last, y))
    }

    fn backprop(&mut self, caches: &[BlockCache], last: &Tensor2, y: &Tensor2, dy: &Tensor2, len: usize) {
        let mut dz = dy.clone();
        dz.data.iter_mut().zip(&y.data).for_each(|(d, &p)| *d *= p * (1.0 - p));
        let dlast = self.head.backward(last, &dz);
        let rows = caches.last().map_or(0, |c| c.out.rows);
        let mut dh = Tensor2::zeros(rows, dlast.cols);
        for b in 0..dlast.rows {
            dh.row_mut(b * len + len - 1).copy_from_slice(dlast.row(b));
        }
        for (block, cache) in self.blocks.iter_mut().zip(caches).rev() {
            dh = block.backward(cache, &dh, len);
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.blocks.iter().flat_map(TcnBlock::params).collect();
        p.extend([&self.head.w, &self.head.b]);
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl SequenceNet for TcnNet {
    fn forward(&self, x: &Tensor2, len: usize) -> Result<Tensor2, NeuralError> {
        Ok(self.run(x, len, None)?.2)
    }

    fn train_batch(
        &mut self,
        x: &Tensor2,
        y: &Tensor2,
        len: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, NeuralError> {
        let (caches, last, pred) = self.run(x, len, rng)?;
        let (loss, dy) = mse_loss(&pred, y)?;
        self.backprop(&caches, &last, &pred, &dy, len);
        Ok(loss)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.blocks.iter_mut().flat_map(TcnBlock::params_mut).collect();
        p.extend(self.head.params_mut());
        p
    }
}

impl Differentiable for TcnNet {
    type Batch = NetBatch;

    fn loss(&self, batch: &NetBatch) -> Result<f64, NeuralError> {
        let pred = SequenceNet::forward(self, &batch.x, batch.len)?;
        Ok(mse_loss(&pred, &batch.y)?.0)
    }

    fn loss_and_grad(&mut self, batch: &NetBatch) -> Result<f64, NeuralError> {
        self.train_batch(&batch.x, &batch.y, batch.len, None)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        SequenceNet::params_mut(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnRegressor {
    pub config: TcnConfig,
    pub net: TcnNet,
    std: Standardizer,
}

impl TcnRegressor {
    pub fn new(config: TcnConfig, feature_dim: usize, seed: u64) -> Result<Self, ModelError> {
        let net = TcnNet::new(&config, feature_dim, seed)?;
        Ok(Self { config, net, std: Standardizer::default() })
    }

    /// Zeroes the output layer so every prediction starts at 0.5.
    pub fn zero_output_layer(&mut self) {
        self.net.head = Dense::zeroed(self.net.head.inputs, DOF);
    }

    pub fn set_standardizer(&mut self, std: Standardizer) {
        self.std = std;
    }

    pub fn checkpoint_load(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut blocks = open_checkpoint(bytes, ModelKind::Tcn)?;
        let c = &mut blocks.config;
        let filters = c.get_u64()? as usize;
        let kernel = c.get_u64()? as usize;
        let n_dil = c.get_u64()? as usize;
        let dilations = (0..n_dil).map(|_| c.get_u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let dropout = c.get_f64()?;
        let seq_len = c.get_u64()? as usize;
        let window_ms = c.get_u32()?;
        let input_dim = c.get_u64()? as usize;
        let config = TcnConfig { filters, kernel, dilations, dropout, seq_len, window_ms };
        let mut model = Self::new(config, input_dim, 0)?;
        let p = &mut blocks.params;
        model.std = read_standardizer(p)?;
        read_params(p, &mut SequenceNet::params_mut(&mut model.net))?;
        if p.remaining() != 0 {
            return Err(ModelError::CorruptCheckpoint("unread parameter bytes".into()));
        }
        Ok(model)
    }
}

impl Regressor for TcnRegressor {
    fn kind(&self) -> ModelKind {
        ModelKind::Tcn
    }

    fn input_spec(&self) -> InputSpec {
        InputSpec { window_ms: self.config.window_ms, seq_len: self.config.seq_len, feature_dim: self.net.input_dim }
    }

    fn predict(&self, seq: &FeatureSequence) -> Result<DofVector, ModelError> {
        let x = sequence_tensor(&self.std, &self.input_spec(), seq)?;
        let y = SequenceNet::forward(&self.net, &x, seq.len())?;
        Ok(to_dof(y.row(0)))
    }

    fn predict_set(&self, set: &SequenceSet) -> Result<Vec<DofVector>, ModelError> {
        predict_sequence_net(&self.net, &self.std, &self.input_spec(), set)
    }

    fn train(&mut self, data: &SequenceSet, opts: &TrainOptions) -> Result<TrainReport, ModelError> {
        check_set(&self.input_spec(), data)?;
        fit_standardizer_once(&mut self.std, data)?;
        fit_sequence_net(&mut self.net, &self.std, data, opts.epochs, opts)
    }

    fn reinforce_update(
        &mut self,
        trial: &SequenceSet,
        epochs: usize,
        opts: &TrainOptions,
    ) -> Result<TrainReport, ModelError> {
        check_set(&self.input_spec(), trial)?;
        fit_sequence_net(&mut self.net, &self.std, trial, epochs, opts)
    }

    fn standardizer(&self) -> &Standardizer {
        &self.std
    }

    fn checkpoint_save(&self) -> Vec<u8> {
        let mut c = ByteWriter::new();
        c.put_u64(self.config.filters as u64);
        c.put_u64(self.config.kernel as u64);
        c.put_u64(self.config.dilations.len() as u64);
        for &d in &self.config.dilations {
            c.put_u64(d as u64);
        }
        c.put_f64(self.config.dropout);
        c.put_u64(self.config.seq_len as u64);
        c.put_u32(self.config.window_ms);
        c.put_u64(self.net.input_dim as u64);
        let mut p = ByteWriter::new();
        write_standardizer(&mut p, &self.std);
        write_params(&mut p, &self.net.params());
        checkpoint::encode(ModelKind::Tcn.tag(), &c.into_bytes(), &p.into_bytes())
    }

    fn box_clone(&self) -> Box<dyn Regressor> {
        Box::new(self.clone())
    }
}

pub(super) fn check_set(spec: &InputSpec, set: &SequenceSet) -> Result<(), ModelError> {
    if set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if set.seq_len() != spec.seq_len || set.dim() != spec.feature_dim {
        return Err(ModelError::SpecMismatch(format!(
            "set of {} x {} for model expecting {} x {}",
            set.seq_len(),
            set.dim(),
            spec.seq_len,
            spec.feature_dim
        )));
    }
    Ok(())
}
