"""The balancing agent: input normalization and the training / deployment input paths.

Training (privileged) path: the actor sees ground-truth ``x_exp``, ``l_imp = encoder(x_imp)``
and the true alignment command. Deployment path: ``x_hat_exp`` and ``l_hat_imp`` come from
the history estimators, and the alignment command is rebuilt from ``x_hat_exp`` and the
measured yaw rate.

Network inputs are normalized with fixed affine maps (not learned statistics) so a checkpoint
fully determines the policy.
"""
from __future__ import annotations

import numpy as np

from .. import env as E
from .. import nets as N
from .. import simcore as sc

_IMP_CENTER = np.concatenate([[4.5], np.zeros(3), [1.0], np.full(12, 40.0), np.full(12, 1.0)])
_IMP_SCALE = np.concatenate([[0.5], np.full(3, 0.2), [0.2], np.full(12, 4.0), np.full(12, 0.2)])


def _obs_affine(model: sc.RobotModel):
    center = np.zeros(E.OBS_DIM)
    scale = np.ones(E.OBS_DIM)
    center[E.OBS_SLICES["accel"]] = [0.0, 0.0, 9.81]
    scale[E.OBS_SLICES["accel"]] = 10.0
    scale[E.OBS_SLICES["ang_vel"]] = 2.0
    scale[E.OBS_SLICES["tilt"]] = 0.5
    center[E.OBS_SLICES["q"]] = model.q_nominal
    scale[E.OBS_SLICES["q"]] = 0.5
    scale[E.OBS_SLICES["qd"]] = 5.0
    scale[E.OBS_SLICES["prev_action"]] = 0.6
    return center, scale


class BalanceAgent:
    def __init__(self, spec: N.NetSpec, store: N.ParamStore, model: sc.RobotModel | None = None):
        self.spec = spec
        self.store = store
        self.obs_center, self.obs_scale = _obs_affine(model or sc.RobotModel())

    # -- parameter groups
    @property
    def policy_params(self) -> list:
        return self.store.names("actor.") + self.store.names("encoder.") + self.store.names("critic.")

    @property
    def adapt_params(self) -> list:
        return self.store.names("est_exp.") + self.store.names("est_imp.") + self.store.names("encoder.")

    # -- normalization
    def norm_obs(self, o):
        return (np.asarray(o) - self.obs_center) / self.obs_scale

    def norm_imp(self, x_imp):
        return (np.asarray(x_imp) - _IMP_CENTER) / _IMP_SCALE

    # -- differentiable pieces (batch dicts with raw arrays)
    def latent(self, tape, mb):
        return N.encoder(tape, self.store, self.spec, self.norm_imp(mb["x_imp"]))

    def exp_target(self, mb):
        return mb["x_exp"][:, :self.spec.exp_dim]

    def _mean(self, tape, o, x_exp, l_imp, u_aln, o_hist):
        s = self.spec
        return N.actor_mean(tape, self.store, s, self.norm_obs(o),
                            x_exp[:, :s.exp_dim] if s.exp_dim else None, l_imp,
                            u_aln if s.aln_dim else None,
                            self.norm_obs(o_hist) if s.history_obs else None)

    def policy(self, tape, mb):
        mean = self._mean(tape, mb["o"], mb["x_exp"], self.latent(tape, mb), mb["u_aln"], mb.get("o_hist"))
        return mean, tape.param(self.store, "actor.log_std")

    def value(self, tape, mb):
        return N.critic(tape, self.store, self.spec, self.norm_obs(mb["o"]), mb["x_exp"], self.norm_imp(mb["x_imp"]))

    def estimate(self, tape, mb):
        return N.estimators(tape, self.store, self.spec, self.norm_obs(mb["o_hist"]))

    # -- numpy acting
    @property
    def log_std(self) -> np.ndarray:
        return self.store["actor.log_std"]

    def act_privileged(self, o, o_hist, x_exp, x_imp, u_aln) -> np.ndarray:
        t = N.Tape(False)
        mb = {"x_imp": x_imp}
        return self._mean(t, o, x_exp, self.latent(t, mb), u_aln, o_hist).value

    def estimate_np(self, o_hist):
        """``(x_hat_exp or None, l_hat_imp)`` from a raw observation history."""
        return N.forward_estimators(self.store, self.spec, self.norm_obs(o_hist))

    def act_estimated(self, o, o_hist):
        """Deployment action; returns ``(mean, x_hat_exp, l_hat_imp, u_hat_aln)``."""
        x_hat, l_hat = self.estimate_np(o_hist)
        mean, u_hat = self.act_with_estimates(o, o_hist, x_hat, l_hat)
        return mean, x_hat, l_hat, u_hat

    def act_with_estimates(self, o, o_hist, x_hat, l_hat):
        """Actor mean for given (estimated or injected) ``x_exp`` and latent; returns ``(mean, u_aln)``.
        The alignment command is rebuilt from ``x_hat`` and the measured yaw rate."""
        u_hat = None
        if self.spec.aln_dim:
            u_hat = E.alignment_command(x_hat, np.asarray(o)[:, E.OBS_SLICES["ang_vel"]][:, 2])
        mean = self._mean(N.Tape(False), o, x_hat, l_hat, u_hat, o_hist).value
        return mean, u_hat

    def latent_np(self, x_imp) -> np.ndarray:
        return self.latent(N.Tape(False), {"x_imp": x_imp}).value

    def value_np(self, o, x_exp, x_imp) -> np.ndarray:
        return self.value(N.Tape(False), {"o": o, "x_exp": x_exp, "x_imp": x_imp}).value
