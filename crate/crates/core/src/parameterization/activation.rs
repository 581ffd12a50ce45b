use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

type ScalarFn = fn(f64) -> f64;

/// Elementwise activation with optional first and second derivatives.
///
/// Built-ins are looked up by name, which is also how activations are
/// serialized. Custom activations can be built with [`Activation::custom`]
/// but cannot be deserialized.
#[derive(Clone, Copy)]
pub struct Activation {
    name: &'static str,
    value: ScalarFn,
    first: Option<ScalarFn>,
    second: Option<ScalarFn>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_d1(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

fn sigmoid_d2(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (1.0 - 2.0 * s)
}

fn tanh_d1(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

fn tanh_d2(x: f64) -> f64 {
    let t = x.tanh();
    -2.0 * t * (1.0 - t * t)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

const BUILTINS: &[Activation] = &[
    Activation {
        name: "identity",
        value: |x| x,
        first: Some(|_| 1.0),
        second: Some(|_| 0.0),
    },
    Activation {
        name: "sigmoid",
        value: sigmoid,
        first: Some(sigmoid_d1),
        second: Some(sigmoid_d2),
    },
    Activation {
        name: "tanh",
        value: f64::tanh,
        first: Some(tanh_d1),
        second: Some(tanh_d2),
    },
    Activation {
        name: "softplus",
        value: softplus,
        first: Some(sigmoid),
        second: Some(sigmoid_d1),
    },
];

impl Activation {
    pub const IDENTITY: Activation = BUILTINS[0];
    pub const SIGMOID: Activation = BUILTINS[1];
    pub const TANH: Activation = BUILTINS[2];
    pub const SOFTPLUS: Activation = BUILTINS[3];

    pub fn by_name(name: &str) -> Result<Activation> {
        BUILTINS
            .iter()
            .find(|a| a.name == name)
            .copied()
            .ok_or_else(|| Error::arg(format!("unknown activation `{name}`")))
    }

    pub fn registered_names() -> impl Iterator<Item = &'static str> {
        BUILTINS.iter().map(|a| a.name)
    }

    pub fn custom(
        name: &'static str,
        value: ScalarFn,
        first: Option<ScalarFn>,
        second: Option<ScalarFn>,
    ) -> Activation {
        Activation {
            name,
            value,
            first,
            second,
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (self.value)(x)
    }

    pub fn has_derivatives(&self) -> bool {
        self.first.is_some() && self.second.is_some()
    }

    pub fn first_derivative(&self) -> Result<ScalarFn> {
        self.first.ok_or_else(|| {
            Error::arg(format!("activation `{}` has no first derivative", self.name))
        })
    }

    pub fn second_derivative(&self) -> Result<ScalarFn> {
        self.second.ok_or_else(|| {
            Error::arg(format!("activation `{}` has no second derivative", self.name))
        })
    }
}

impl PartialEq for Activation {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

impl fmt::Debug for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Activation({})", self.name)
    }
}

impl Serialize for Activation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name)
    }
}

impl<'de> Deserialize<'de> for Activation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        Activation::by_name(&name).map_err(serde::de::Error::custom)
    }
}
