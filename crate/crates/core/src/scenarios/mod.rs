//! End-to-end stories: small oracle-friendly toys, partially observable
//! slate recommendation, latent satisfaction, and a provider ecosystem.

pub mod ecosystem;
pub mod latent_sat;
pub mod porl;
pub mod toy;

use crate::error::{Error, Result};

/// A flat, string-addressable configuration.
pub trait Configurable {
    /// Sets one field from its textual form. Unknown keys are an error.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    /// Every field as `(key, value)`, in declaration order.
    fn entries(&self) -> Vec<(&'static str, String)>;
    fn validate(&self) -> Result<()>;
}

pub(crate) fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

/// Declares a config struct with defaults plus [`Configurable`] accessors;
/// the struct's own `check` method supplies validation.
macro_rules! config_struct {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr, )*
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                $name { $( $field: $default, )* }
            }
        }

        impl $crate::scenarios::Configurable for $name {
            fn set(&mut self, key: &str, value: &str) -> $crate::error::Result<()> {
                match key {
                    $( stringify!($field) => self.$field = $crate::scenarios::parse_field(key, value)?, )*
                    _ => {
                        return Err($crate::error::Error::Config(format!(
                            "unknown key `{key}` for {}",
                            stringify!($name)
                        )))
                    }
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( (stringify!($field), self.$field.to_string()), )* ]
            }

            fn validate(&self) -> $crate::error::Result<()> {
                self.check()
            }
        }
    };
}
pub(crate) use config_struct;

/// A comma-separated list of values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct List<T>(pub Vec<T>);

impl<T: std::str::FromStr> std::str::FromStr for List<T> {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("cannot parse list entry `{}`", p.trim()))))
            .collect::<Result<Vec<T>>>()
            .map(List)
    }
}

impl<T: std::fmt::Display> std::fmt::Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|x| x.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// An independent seed for the `index`-th unit of work under `label`.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    use rand::Rng;
    crate::dist::RngStream::from_label(seed, label).child(index).row(0).random()
}

pub(crate) fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    config_struct! {
        pub struct Demo {
            /// A count.
            n: usize = 3,
            x: f64 = 0.5,
        }
    }

    impl Demo {
        fn check(&self) -> Result<()> {
            require(self.n > 0, "n must be ≥ 1")
        }
    }

    #[test]
    fn set_and_list() {
        let mut d = Demo::default();
        d.set("n", "7").unwrap();
        d.set("x", "-1.25").unwrap();
        assert_eq!(d.entries(), vec![("n", "7".to_string()), ("x", "-1.25".to_string())]);
        assert!(d.set("y", "1").unwrap_err().to_string().contains("unknown key `y`"));
        assert!(d.set("n", "a").is_err());
        d.set("n", "0").unwrap();
        assert!(d.validate().is_err());
    }

    #[test]
    fn lists_round_trip() {
        let l: List<f64> = "0, 0.6,1.2".parse().unwrap();
        assert_eq!(l.0, vec![0.0, 0.6, 1.2]);
        assert_eq!(l.to_string(), "0,0.6,1.2");
        assert!("".parse::<List<usize>>().unwrap().0.is_empty());
        assert!("1,x".parse::<List<usize>>().is_err());
    }
}
