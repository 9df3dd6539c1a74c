use super::AttackError;
use crate::tensor::{backward_to_input, logits, softmax_cross_entropy, vjp_input, Tensor};
use crate::zoo::{InputSpec, ModelGraph};

/// Anything that can supply the gradient of the attack loss with respect to
/// its input: a single white-box model, an ensemble, or an analytic stand-in.
pub trait Surrogate {
    /// Gradient of the mean cross-entropy of `labels` with respect to `x`.
    fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor, AttackError>;

    /// Short identifier used in reports and seed derivation.
    fn id(&self) -> String;
}

impl Surrogate for ModelGraph {
    fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor, AttackError> {
        let x = x.clone().with_requires_grad(true);
        Ok(backward_to_input(self, &x, labels)?)
    }

    fn id(&self) -> String {
        self.name().to_string()
    }
}

/// Several white-box models attacked jointly through their mean logits.
#[derive(Debug, Clone)]
pub struct Ensemble<'a> {
    members: Vec<&'a ModelGraph>,
}

impl<'a> Ensemble<'a> {
    /// Members must share one input spec. A single member is allowed and
    /// behaves exactly like that model.
    pub fn new(members: Vec<&'a ModelGraph>) -> Result<Self, AttackError> {
        let Some(first) = members.first() else {
            return Err(AttackError::InvalidConfig("ensemble needs at least one member".into()));
        };
        let spec: InputSpec = first.input_spec();
        if let Some(m) = members.iter().find(|m| m.input_spec() != spec) {
            return Err(AttackError::InvalidConfig(format!(
                "ensemble member `{}` has input spec {:?}, expected {:?}",
                m.name(),
                m.input_spec(),
                spec
            )));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[&'a ModelGraph] {
        &self.members
    }

    /// Mean of member logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, AttackError> {
        let mut acc: Option<Tensor> = None;
        for m in &self.members {
            let l = logits(m, x)?;
            match acc.as_mut() {
                None => acc = Some(l),
                Some(a) => a.data_mut().iter_mut().zip(l.data()).for_each(|(a, b)| *a += b),
            }
        }
        let mut acc = acc.expect("non-empty ensemble");
        let inv = self.members.len() as f32;
        acc.data_mut().iter_mut().for_each(|v| *v /= inv);
        Ok(acc)
    }
}

impl Surrogate for Ensemble<'_> {
    fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor, AttackError> {
        let fused = self.logits(x)?;
        let (_, dlogits) = softmax_cross_entropy(&fused, labels)?;
        let inv = self.members.len() as f32;
        let share = dlogits.map(|v| v / inv);
        let mut grad: Option<Tensor> = None;
        for m in &self.members {
            let g = vjp_input(m, x, &share)?;
            match grad.as_mut() {
                None => grad = Some(g),
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            }
        }
        Ok(grad.expect("non-empty ensemble"))
    }

    fn id(&self) -> String {
        let names: Vec<&str> = self.members.iter().map(|m| m.name()).collect();
        format!("ens-{}", names.join("+"))
    }
}
