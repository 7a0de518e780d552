"""Alternating optimization of the similarity, generator and discriminator.

One iteration = (optional latent contradiction step) + one task's generator
step + that task's discriminator step, with three saliency iterations per
camouflage iteration. Each parameter set has its own optimizer so a
sub-step can never leak an update into another set.
"""

import contextlib
import csv
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import torch
from torch.nn.utils import clip_grad_norm_

from .config import config_from_dict
from .data import BatchCycler
from .decoder import SharedDecoder
from .discriminator import FCDiscriminator
from .encoders import init_encoders
from .losses import discriminator_loss, generator_adv_loss, task_structure_loss
from .similarity import SimilarityHead, latent_cosine


class SchedulingError(RuntimeError):
    """A step was asked to run without the batch its schedule requires."""


def lr_at(iteration, config):
    """Step-decay schedule: base rate, then base * decay_rate from decay_step on."""
    if iteration < config.decay_step:
        return config.base_lr
    return config.base_lr * config.decay_rate


def task_for_iteration(t, sod_cod_ratio=(3, 1)):
    """Task of 1-based iteration `t`: the first `s` of every s+c block are SOD."""
    s, c = sod_cod_ratio
    return "sod" if (t - 1) % (s + c) < s else "cod"


@dataclass
class StepLog:
    iteration: int
    task: str
    lr: float
    loss_str: float = None
    loss_adv: float = None
    loss_dis: float = None
    loss_latent: float = None


HISTORY_COLUMNS = ("iter", "task", "L_str", "L_adv", "L_dis", "L_latent", "lr")


def history_row(log):
    def cell(v):
        return "" if v is None else repr(v)

    return (log.iteration, log.task, cell(log.loss_str), cell(log.loss_adv),
            cell(log.loss_dis), cell(log.loss_latent), repr(log.lr))


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for log in history:
            writer.writerow(history_row(log))


@contextlib.contextmanager
def _eval_scope(*modules):
    was_training = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        yield
    finally:
        for m, flag in zip(modules, was_training):
            m.train(flag)


def _freeze_batchnorm(module):
    for m in module.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            m.eval()


class JointTrainer:
    """Owns the five parameter sets, their optimizers and the iteration count."""

    def __init__(self, config, pretrained_store=None):
        self.config = config
        torch.manual_seed(config.seed)
        self.encoder_s, self.encoder_c = init_encoders(pretrained_store)
        self.decoder = SharedDecoder(pretrained_store)
        self.similarity = SimilarityHead(config.latent_dim)
        self.discriminator = FCDiscriminator()
        self.iteration = 0

        lr = config.base_lr
        self.optimizers = {
            name: torch.optim.Adam(module.parameters(), lr=lr, fused=True)
            for name, module in self.modules.items()
        }
        self.train_mode()

    # -- module bookkeeping ------------------------------------------------

    @property
    def modules(self):
        return {
            "encoder_s": self.encoder_s,
            "encoder_c": self.encoder_c,
            "decoder": self.decoder,
            "similarity": self.similarity,
            "discriminator": self.discriminator,
        }

    def train_mode(self):
        for m in self.modules.values():
            m.train()
            if self.config.freeze_bn:
                _freeze_batchnorm(m)

    def _encoder(self, task):
        return self.encoder_s if task == "sod" else self.encoder_c

    def _set_lr(self, lr):
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr

    def _apply(self, names, loss):
        """Backward `loss` and step exactly the optimizers in `names`."""
        params = [p for name in names for p in self.modules[name].parameters()]
        for name in names:
            self.optimizers[name].zero_grad(set_to_none=True)
        loss.backward()
        if self.config.grad_clip > 0:
            clip_grad_norm_(params, self.config.grad_clip)
        for name in names:
            self.optimizers[name].step()

    # -- sub-steps ----------------------------------------------------------

    def similarity_step(self, connection_batch):
        """Latent contradiction update of both encoders and the shared head."""
        code_s = self.similarity(self.encoder_s(connection_batch.images))
        code_c = self.similarity(self.encoder_c(connection_batch.images))
        cos, _ = latent_cosine(code_s, code_c)
        self._apply(["encoder_s", "encoder_c", "similarity"], self.config.latent_weight * cos)
        return cos.detach().item()

    def generator_step(self, task, batch):
        """Structure (+ adversarial) update of the task encoder and decoder.

        The discriminator is held in eval mode with gradients disabled for
        the adversarial term, so neither its parameters nor its running
        statistics move here. Returns the detached refined probability map
        for the subsequent discriminator step.
        """
        if batch.masks is None:
            raise SchedulingError(f"{task} generator step needs a batch with masks")
        pair = self.decoder(self._encoder(task)(batch.images))
        loss_str = task_structure_loss(pair, batch.masks)
        prob = torch.sigmoid(pair.refined_logits)

        loss_adv = None
        loss = loss_str
        if not self.config.disable_adversarial:
            for p in self.discriminator.parameters():
                p.requires_grad_(False)
            with _eval_scope(self.discriminator):
                conf = self.discriminator(prob)
            loss_adv = generator_adv_loss(conf)
            lam = self.config.lambda1 if task == "sod" else self.config.lambda2
            loss = loss + lam * loss_adv
            for p in self.discriminator.parameters():
                p.requires_grad_(True)

        enc_name = "encoder_s" if task == "sod" else "encoder_c"
        self._apply([enc_name, "decoder"], loss)
        adv_value = None if loss_adv is None else loss_adv.detach().item()
        return loss_str.detach().item(), adv_value, prob.detach()

    def discriminator_step(self, prob_detached, masks):
        """Real/fake update of the confidence estimator only."""
        conf_pred = self.discriminator(prob_detached)
        conf_gt = self.discriminator(masks)
        loss = discriminator_loss(conf_pred, conf_gt)
        self._apply(["discriminator"], loss)
        return loss.detach().item()

    # -- one full iteration ---------------------------------------------------

    def step(self, sod_batch=None, cod_batch=None, connection_batch=None, force_task=None):
        t = self.iteration + 1
        lr = lr_at(self.iteration, self.config)
        self._set_lr(lr)
        task = force_task or task_for_iteration(t, self.config.sod_cod_ratio)
        log = StepLog(iteration=t, task=task, lr=lr)

        if not self.config.disable_similarity and t % self.config.similarity_interval == 0:
            if connection_batch is None:
                raise SchedulingError(f"iteration {t} needs a connection batch for the similarity step")
            log.loss_latent = self.similarity_step(connection_batch)

        batch = sod_batch if task == "sod" else cod_batch
        if batch is None:
            raise SchedulingError(f"iteration {t} is a {task} step but no {task} batch was given")
        log.loss_str, log.loss_adv, prob = self.generator_step(task, batch)
        if not self.config.disable_adversarial:
            log.loss_dis = self.discriminator_step(prob, batch.masks)

        self.iteration = t
        return log

    # -- inference -------------------------------------------------------------

    def predict(self, images, task):
        """Eval-mode forward of one task branch; returns the logit pair."""
        encoder = self._encoder(task)
        with _eval_scope(encoder, self.decoder), torch.no_grad():
            return self.decoder(encoder(images))

    # -- persistence -------------------------------------------------------------

    def state_dict(self):
        return {
            "iteration": self.iteration,
            "modules": {name: m.state_dict() for name, m in self.modules.items()},
            "optimizers": {name: opt.state_dict() for name, opt in self.optimizers.items()},
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state):
        self.iteration = int(state["iteration"])
        for name, m in self.modules.items():
            m.load_state_dict(state["modules"][name])
        for name, opt in self.optimizers.items():
            opt.load_state_dict(state["optimizers"][name])
        torch.set_rng_state(state["torch_rng"])
        self.train_mode()

    def save_checkpoint(self, path, streams=None):
        payload = {
            "config": asdict(self.config),
            "trainer": self.state_dict(),
            "streams": streams or {},
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)

    @classmethod
    def from_checkpoint(cls, path, pretrained_store=None):
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except OSError as exc:
            raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
        trainer = cls(config_from_dict(payload["config"]), pretrained_store)
        trainer.load_state_dict(payload["trainer"])
        return trainer, payload.get("streams", {})


@dataclass
class FitResult:
    trainers: dict
    history: list

    @property
    def trainer(self):
        if len(self.trainers) != 1:
            raise ValueError(f"run produced {sorted(self.trainers)} trainers, not a single one")
        return next(iter(self.trainers.values()))


def _build_cyclers(manifests, config, needs_similarity, tasks=("sod", "cod")):
    kwargs = dict(batch_size=config.batch_size, shuffle=True, target_size=config.target_size,
                  flip=config.flip, num_workers=config.num_workers)
    names = list(tasks) + (["connection"] if needs_similarity else [])
    offsets = {"sod": 0, "cod": 1, "connection": 2}
    cyclers = {}
    for name in names:
        if manifests.get(name) is None:
            raise ValueError(f"training requires a {name!r} manifest")
        cyclers[name] = BatchCycler(manifests[name], seed=config.seed + offsets[name], **kwargs)
    return cyclers


def _run_loop(trainer, cyclers, config, out_dir, history, force_task=None):
    csv_path = Path(out_dir) / "history.csv" if out_dir else None
    needs_similarity = "connection" in cyclers
    while trainer.iteration < config.max_iters:
        t = trainer.iteration + 1
        task = force_task or task_for_iteration(t, config.sod_cod_ratio)
        kwargs = {f"{task}_batch": cyclers[task].next(), "force_task": force_task}
        if needs_similarity and t % config.similarity_interval == 0:
            kwargs["connection_batch"] = cyclers["connection"].next()
        history.append(trainer.step(**kwargs))
        if out_dir and config.checkpoint_every and t % config.checkpoint_every == 0:
            streams = {name: c.state() for name, c in cyclers.items()}
            trainer.save_checkpoint(Path(out_dir) / f"checkpoint_iter{t}.pt", streams)
    if out_dir:
        streams = {name: c.state() for name, c in cyclers.items()}
        trainer.save_checkpoint(Path(out_dir) / "checkpoint_last.pt", streams)
        write_history_csv(csv_path, history)
    return history


def fit(manifests, config, out_dir=None, resume=None, pretrained_store=None):
    """Run the training loop to `config.max_iters` iterations.

    `manifests` maps "sod"/"cod"/"connection" to DatasetManifest objects.
    With `separate_tasks` each branch trains alone (no similarity, no
    adversarial learning, nothing shared); otherwise one joint run.
    Periodic checkpoints, a final checkpoint and a loss-history CSV are
    written under `out_dir` when given.
    """
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    if config.separate_tasks:
        if resume:
            raise ValueError("resume is not supported for separate-task runs")
        trainers, history = {}, []
        for task in ("sod", "cod"):
            sub_config = replace(config, separate_tasks=False, disable_similarity=True,
                                 disable_adversarial=True)
            sub_dir = Path(out_dir) / task if out_dir else None
            if sub_dir:
                sub_dir.mkdir(parents=True, exist_ok=True)
            trainer = JointTrainer(sub_config, pretrained_store)
            cyclers = _build_cyclers(manifests, sub_config, needs_similarity=False, tasks=(task,))
            sub_history = _run_loop(trainer, cyclers, sub_config, sub_dir, [], force_task=task)
            trainers[task] = trainer
            history.extend(sub_history)
        return FitResult(trainers=trainers, history=history)

    needs_similarity = not config.disable_similarity
    if resume:
        trainer, streams = JointTrainer.from_checkpoint(resume, pretrained_store)
        trainer.config = config
        cyclers = _build_cyclers(manifests, config, needs_similarity)
        for name, cycler in cyclers.items():
            if name in streams:
                cycler.set_state(streams[name])
    else:
        trainer = JointTrainer(config, pretrained_store)
        cyclers = _build_cyclers(manifests, config, needs_similarity)
    history = _run_loop(trainer, cyclers, config, out_dir, [])
    return FitResult(trainers={"joint": trainer}, history=history)
