//! Named, ordered parameter sets.
//!
//! Weight structs are generic over their slot type so one definition serves
//! as a shape layout (`ParamSpec`), as stored values (`Tensor<T>`) and as
//! graph handles (`NodeId`). Traversal order is the declaration order of
//! the fields and is stable across builds; checkpoints and parameter counts
//! rely on it.

use std::convert::Infallible;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Seed offset of the stream that initializes augmentation parameters, so
/// the remaining parameters are identical across block variants.
const AUGMENTATION_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Accounting category of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    QkvProjection,
    OutputProjection,
    Horizontal,
    Vertical,
    FeedForward,
    LayerNorm,
    Embedding,
}

impl ParamKind {
    pub const ALL: [ParamKind; 7] = [
        ParamKind::QkvProjection,
        ParamKind::OutputProjection,
        ParamKind::Horizontal,
        ParamKind::Vertical,
        ParamKind::FeedForward,
        ParamKind::LayerNorm,
        ParamKind::Embedding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::QkvProjection => "qkv_projections",
            ParamKind::OutputProjection => "output_projection",
            ParamKind::Horizontal => "horizontal_extra",
            ParamKind::Vertical => "vertical_extra",
            ParamKind::FeedForward => "ffn",
            ParamKind::LayerNorm => "layernorm",
            ParamKind::Embedding => "embeddings",
        }
    }

    pub fn is_augmentation(self) -> bool {
        matches!(self, ParamKind::Horizontal | ParamKind::Vertical)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `(-bound, bound)`.
    Uniform(f64),
    Zeros,
    Ones,
}

/// Shape, category and initializer of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    pub fn matrix(rows: usize, cols: usize, kind: ParamKind) -> Self {
        Self {
            shape: vec![rows, cols],
            kind,
            init: Init::Uniform(1.0 / (rows as f64).sqrt()),
        }
    }

    pub fn zeros(shape: &[usize], kind: ParamKind) -> Self {
        Self {
            shape: shape.to_vec(),
            kind,
            init: Init::Zeros,
        }
    }

    pub fn ones(shape: &[usize], kind: ParamKind) -> Self {
        Self {
            shape: shape.to_vec(),
            kind,
            init: Init::Ones,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered traversal over a named parameter set with slots of type `P`.
pub trait Weights<P>: Sized {
    type With<Q>: Weights<Q>;

    fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<Self::With<Q>, E>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));

    fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::With<Q> {
        let mapped: Result<_, Infallible> = self.try_map(prefix, &mut |name, p| Ok(f(name, p)));
        match mapped {
            Ok(w) => w,
            Err(never) => match never {},
        }
    }

    /// All slots with their full names, in traversal order.
    fn named<'a>(&'a self, prefix: &str) -> Vec<(String, &'a P)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, p| out.push((name.to_string(), p)));
        out
    }
}

/// `prefix.field`, or just `field` at the root.
pub fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

/// How to fill parameters from a layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitStyle {
    /// Use each spec's initializer.
    Standard,
    /// Replace every constant initializer with small uniform noise (ones
    /// become `1 + noise`). Used to exercise all gradient paths.
    Perturbed,
}

/// Instantiate a layout with seeded values.
///
/// Augmentation parameters draw from a separate stream, so two layouts that
/// differ only in their augmentation sets get identical values for all
/// shared parameters.
pub fn init_weights<T: Real, W: Weights<ParamSpec>>(layout: &W, seed: u64, style: InitStyle) -> W::With<Tensor<T>> {
    let mut base = ChaCha8Rng::seed_from_u64(seed);
    let mut aux = ChaCha8Rng::seed_from_u64(seed ^ AUGMENTATION_STREAM);
    layout.map("", &mut |_, spec| {
        let rng = if spec.kind.is_augmentation() {
            &mut aux
        } else {
            &mut base
        };
        let n = spec.numel();
        let data: Vec<f64> = match (spec.init, style) {
            (Init::Uniform(b), _) => (0..n).map(|_| rng.gen_range(-b..b)).collect(),
            (Init::Zeros, InitStyle::Standard) => vec![0.0; n],
            (Init::Ones, InitStyle::Standard) => vec![1.0; n],
            (Init::Zeros, InitStyle::Perturbed) => (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            (Init::Ones, InitStyle::Perturbed) => (0..n).map(|_| 1.0 + rng.gen_range(-0.5..0.5)).collect(),
        };
        Tensor::from_f64(spec.shape.clone(), &data).expect("layout shapes are valid")
    })
}

/// Total number of scalars in a set of tensors.
pub fn count_scalars<T: Real, W: Weights<Tensor<T>>>(weights: &W) -> usize {
    let mut total = 0;
    weights.visit("", &mut |_, t| total += t.numel());
    total
}

/// Implements [`Weights`] for a struct whose fields are slots (`P`),
/// nested weight sets, `Option`s of weight sets, or `Vec`s of weight sets.
#[macro_export]
#[doc(hidden)]
macro_rules! impl_weights {
    ($name:ident { $($field:ident : $kind:tt),* $(,)? }) => {
        impl<P> $crate::params::Weights<P> for $name<P> {
            type With<Q> = $name<Q>;

            fn try_map<Q, E>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &P) -> ::std::result::Result<Q, E>,
            ) -> ::std::result::Result<$name<Q>, E> {
                Ok($name {
                    $($field: $crate::impl_weights!(@map $kind, self.$field, prefix, stringify!($field), f),)*
                })
            }

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
                $($crate::impl_weights!(@visit $kind, self.$field, prefix, stringify!($field), f);)*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
                $($crate::impl_weights!(@visit_mut $kind, self.$field, prefix, stringify!($field), f);)*
            }
        }
    };

    (@map slot, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $f(&$crate::params::join($prefix, $field), &$e)?
    };
    (@map nested, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $e.try_map(&$crate::params::join($prefix, $field), $f)?
    };
    (@map optional, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        match &$e {
            Some(inner) => Some(inner.try_map(&$crate::params::join($prefix, $field), $f)?),
            None => None,
        }
    };
    (@map list, $e:expr, $prefix:expr, $field:expr, $f:expr) => {{
        let base = $crate::params::join($prefix, $field);
        let mut out = Vec::with_capacity($e.len());
        for (i, item) in $e.iter().enumerate() {
            out.push(item.try_map(&format!("{base}.{i}"), $f)?);
        }
        out
    }};

    (@visit slot, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $f(&$crate::params::join($prefix, $field), &$e)
    };
    (@visit nested, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $e.visit(&$crate::params::join($prefix, $field), $f)
    };
    (@visit optional, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        if let Some(inner) = &$e {
            inner.visit(&$crate::params::join($prefix, $field), $f)
        }
    };
    (@visit list, $e:expr, $prefix:expr, $field:expr, $f:expr) => {{
        let base = $crate::params::join($prefix, $field);
        for (i, item) in $e.iter().enumerate() {
            item.visit(&format!("{base}.{i}"), $f);
        }
    }};

    (@visit_mut slot, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $f(&$crate::params::join($prefix, $field), &mut $e)
    };
    (@visit_mut nested, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        $e.visit_mut(&$crate::params::join($prefix, $field), $f)
    };
    (@visit_mut optional, $e:expr, $prefix:expr, $field:expr, $f:expr) => {
        if let Some(inner) = &mut $e {
            inner.visit_mut(&$crate::params::join($prefix, $field), $f)
        }
    };
    (@visit_mut list, $e:expr, $prefix:expr, $field:expr, $f:expr) => {{
        let base = $crate::params::join($prefix, $field);
        for (i, item) in $e.iter_mut().enumerate() {
            item.visit_mut(&format!("{base}.{i}"), $f);
        }
    }};
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq)]
    struct Inner<P> {
        a: P,
    }
    crate::impl_weights!(Inner { a: slot });

    #[derive(Debug, PartialEq)]
    struct Outer<P> {
        x: P,
        items: Vec<Inner<P>>,
        maybe: Option<Inner<P>>,
        tail: Inner<P>,
    }
    crate::impl_weights!(Outer {
        x: slot,
        items: list,
        maybe: optional,
        tail: nested
    });

    #[test]
    fn traversal_names_and_order() {
        let w = Outer {
            x: 1,
            items: vec![Inner { a: 2 }, Inner { a: 3 }],
            maybe: None,
            tail: Inner { a: 4 },
        };
        let named: Vec<_> = w.named("root").into_iter().map(|(n, v)| (n, *v)).collect();
        assert_eq!(
            named,
            vec![
                ("root.x".to_string(), 1),
                ("root.items.0.a".to_string(), 2),
                ("root.items.1.a".to_string(), 3),
                ("root.tail.a".to_string(), 4),
            ]
        );
        let doubled = w.map("", &mut |_, v| v * 2);
        assert_eq!(doubled.items[1].a, 6);
    }

    #[test]
    fn augmentation_stream_is_separate() {
        let plain = Outer {
            x: ParamSpec::matrix(2, 2, ParamKind::FeedForward),
            items: vec![],
            maybe: None,
            tail: Inner {
                a: ParamSpec::matrix(3, 1, ParamKind::FeedForward),
            },
        };
        let augmented = Outer {
            maybe: Some(Inner {
                a: ParamSpec::matrix(4, 4, ParamKind::Horizontal),
            }),
            ..Outer {
                x: plain.x.clone(),
                items: vec![],
                maybe: None,
                tail: Inner {
                    a: plain.tail.a.clone(),
                },
            }
        };
        let a: Outer<Tensor<f64>> = init_weights(&plain, 5, InitStyle::Standard);
        let b: Outer<Tensor<f64>> = init_weights(&augmented, 5, InitStyle::Standard);
        assert_eq!(a.x, b.x);
        assert_eq!(a.tail, b.tail);
    }
}
