"""
CLASH 步态描述子与架构搜索流水线主程序
"""
import argparse
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from config import SearchConfig, config
from services.dstf import DEGENERATE_POLICIES, NORMALIZATIONS, transform_sequence
from services.gradcheck import ensure_passed, results_table, run_gradcheck
from services.metrics import descriptor_report, gei, geni, sensitivity_fraction
from services.optimizer import load_checkpoint, save_checkpoint
from services.search import (
    build_network,
    discretize,
    evaluate_rank1,
    label_map,
    prepare_samples,
    retrain,
    search,
    split_dataset,
)
from services.silhouette import SilhouetteSequence, build_corpus, load_sequences
from services.storage import (
    RunManifest,
    read_architecture,
    read_dstf,
    write_alpha_history,
    write_architecture,
    write_config_snapshot,
    write_corpus,
    write_dstf,
    write_loss_history,
    write_metrics_report,
    write_preview_dir,
    write_unit_image,
)
from utils.errors import ClashError, ConfigError, DegenerateFrameError, InputError
from utils.helpers import ensure_dir, list_frame_files, tree_digest
from utils.logger import logger


def emit(**values):
    """机器可读结果：每行一个 key=value，写到标准输出"""
    for key, value in values.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        print(f"{key}={value}", flush=True)


def sequence_name(seq: SilhouetteSequence, directory: str) -> str:
    if seq.subject_id:
        return f"{seq.subject_id}_{seq.view_id}"
    return os.path.basename(os.path.normpath(directory))


class ClashPipeline:
    """CLASH 流水线：每个子命令一个方法"""

    def __init__(self, threads: int = 1):
        self.threads = max(threads, 1)
        logger.debug(f"流水线已初始化, 线程数 {self.threads}")

    def run(self, args: argparse.Namespace) -> int:
        handler = getattr(self, f"cmd_{args.command}")
        logger.info("=" * 60)
        logger.info(f"执行命令: {args.command}")
        logger.info("=" * 60)
        handler(args)
        return 0

    # ------------------------------------------------------------ 语料与描述子

    def cmd_synthesize(self, args: argparse.Namespace):
        """合成步行者语料库（PGM 帧目录 + manifest.csv）"""
        cfg = self._load_config(args)
        corpus = build_corpus(
            cfg.num_ids, cfg.seqs_per_id, cfg.frames, cfg.height, cfg.width,
            seed=cfg.seed, noise_prob=cfg.noise_prob
        )
        manifest = write_corpus(corpus, args.out)
        RunManifest("synthesize", cfg.to_dict(), seed=cfg.seed).write(args.out)
        emit(sequences=len(corpus), frames=sum(len(s) for s in corpus), manifest=manifest)

    def cmd_transform(self, args: argparse.Namespace):
        """剪影 → DSTF 原始文件（可选 PGM 预览）"""
        ensure_dir(args.out)
        sequences = load_sequences(args.input)
        digests: Dict[str, str] = {}
        frames = 0
        for seq, directory in sequences:
            name = sequence_name(seq, directory)
            try:
                dstf = transform_sequence(
                    seq,
                    policy=args.degenerate,
                    normalization=args.norm,
                    signed=args.variant == "dstf",
                    threads=self.threads,
                    source=directory
                )
            except DegenerateFrameError as e:
                paths = list_frame_files(directory)
                frame_path = paths[e.frame_index] if e.frame_index is not None and e.frame_index < len(paths) else directory
                raise DegenerateFrameError(f"退化帧: {frame_path}", e.frame_index, frame_path)

            write_dstf(os.path.join(args.out, f"{name}.dstf"), dstf)
            if args.preview:
                write_preview_dir(dstf, os.path.join(args.out, f"{name}_preview"))
            digests[name] = tree_digest(list_frame_files(directory))
            frames += len(dstf)
            logger.info(f"✓ {name}: {len(dstf)}/{len(seq)} 帧")

        RunManifest(
            "transform",
            {"norm": args.norm, "degenerate": args.degenerate, "variant": args.variant, "preview": args.preview},
            inputs=digests
        ).write(args.out)
        emit(sequences=len(sequences), frames=frames, out=args.out)

    def cmd_metrics(self, args: argparse.Namespace):
        """逐帧熵与帧差报告，GEnI / GEI 图写在报告旁边"""
        if not os.path.isdir(args.dstf):
            raise InputError(f"DSTF 目录不存在: {args.dstf}")
        out_dir = ensure_dir(os.path.dirname(os.path.abspath(args.out)))
        geni_dir = ensure_dir(os.path.join(out_dir, "geni"))
        gei_dir = ensure_dir(os.path.join(out_dir, "gei"))
        tables = {}
        sensitivities = []
        digests: Dict[str, str] = {}
        for seq, directory in load_sequences(args.sil):
            name = sequence_name(seq, directory)
            dstf_path = os.path.join(args.dstf, f"{name}.dstf")
            dstf = read_dstf(dstf_path)
            table, _ = descriptor_report(seq, dstf, bins=args.bins)
            tables[name] = table
            sensitivities.append(sensitivity_fraction(seq, dstf))
            write_unit_image(os.path.join(geni_dir, f"{name}.pgm"), geni(seq).entropy)
            write_unit_image(os.path.join(gei_dir, f"{name}.pgm"), gei(seq))
            digests[name] = tree_digest(list_frame_files(directory) + [dstf_path])

        if not tables:
            raise InputError(f"没有可度量的序列: {args.sil}")
        mean_sil = float(np.mean([t["entropy_sil"].mean() for t in tables.values()]))
        mean_dstf = float(np.mean([t["entropy_dstf"].mean() for t in tables.values()]))
        summary = {
            "mean_entropy_sil": mean_sil,
            "mean_entropy_dstf": mean_dstf,
            "ratio": mean_dstf / mean_sil if mean_sil > 0 else float("nan"),
        }
        write_metrics_report(args.out, tables, summary)
        RunManifest("metrics", {"bins": args.bins}, inputs=digests).write(out_dir)
        logger.info(f"平均熵 剪影 {mean_sil:.3f} bits, DSTF {mean_dstf:.3f} bits, 比值 {summary['ratio']:.2f}")
        emit(
            sequences=len(tables),
            mean_entropy_sil=mean_sil,
            mean_entropy_dstf=mean_dstf,
            ratio=summary["ratio"],
            sensitivity=float(np.mean(sensitivities)),
            report=args.out
        )

    # ------------------------------------------------------------ 搜索 / 重训练 / 评估

    def cmd_search(self, args: argparse.Namespace):
        """双层架构搜索，导出离散化架构与 α 历史"""
        cfg = self._load_config(args)
        samples, num_classes = self._training_samples(cfg)
        train, val = split_dataset(samples, cfg.val_fraction, cfg.seed)
        arch, state = search(cfg, train, val, num_classes, run_dir=args.out)
        final = discretize(arch)

        self._write_run(args, cfg, "search")
        write_alpha_history(os.path.join(args.out, "alpha_history.csv"), state.alpha_history)
        write_loss_history(os.path.join(args.out, "search_loss.csv"), state.train_history, state.val_history)
        arch_path = os.path.join(args.out, "architecture.json")
        write_architecture(arch_path, final)
        emit(
            w_steps=state.w_steps,
            alpha_steps=state.alpha_steps,
            ops=",".join(k.value for k in final.discrete),
            architecture=arch_path
        )

    def cmd_retrain(self, args: argparse.Namespace):
        """以离散架构从头训练"""
        cfg = self._load_config(args)
        arch = self._load_architecture(args, cfg)
        samples, num_classes = self._training_samples(cfg)
        network, history = retrain(arch, samples, cfg, num_classes, run_dir=args.out)

        self._write_run(args, cfg, "retrain")
        weights = os.path.join(args.out, "weights.ckpt")
        save_checkpoint(weights, network.state_dict())
        write_loss_history(os.path.join(args.out, "retrain_loss.csv"), history)
        if arch is not None:
            write_architecture(os.path.join(args.out, "architecture.json"), arch)
        emit(
            iterations=len(history),
            initial_loss=history[0] if history else float("nan"),
            final_loss=history[-1] if history else float("nan"),
            weights=weights
        )

    def cmd_eval(self, args: argparse.Namespace):
        """在留出的合成序列上评估 rank-1"""
        cfg = self._load_config(args)
        arch = self._load_architecture(args, cfg)
        weights = args.weights or os.path.join(args.out, "weights.ckpt")
        if not os.path.isfile(weights):
            raise InputError(f"权重文件不存在: {weights}")

        train_corpus = self._training_corpus(cfg)
        labels = label_map(train_corpus)
        network = build_network(cfg, len(labels), arch)
        network.load_state_dict(load_checkpoint(weights))

        heldout = build_corpus(
            cfg.num_ids, cfg.eval_seqs_per_id, cfg.frames, cfg.height, cfg.width,
            seed=cfg.seed, noise_prob=cfg.noise_prob, first_sequence=cfg.seqs_per_id
        )
        samples = prepare_samples(heldout, labels, cfg.descriptor_names, threads=self.threads)
        gallery, probe = split_dataset(samples, 0.5, cfg.seed)
        if args.probe == "gallery":
            probe = gallery
        accuracy = evaluate_rank1(network, gallery, probe, cfg.clip_length)

        self._write_run(args, cfg, "eval", extra_inputs=[weights])
        emit(rank1=accuracy, gallery=len(gallery), probe=len(probe))

    # ------------------------------------------------------------ 梯度校验

    def cmd_gradcheck(self, args: argparse.Namespace):
        """中心差分梯度校验"""
        results = run_gradcheck(args.ops, trials=args.trials, seed=args.seed)
        logger.info("\n" + results_table(results).to_string(index=False))
        for r in results:
            emit(**{r.name: f"{r.max_error:.3e}"})
        emit(checked=len(results), failed=sum(not r.passed for r in results))
        ensure_passed(results)

    # ------------------------------------------------------------ 内部工具

    def _load_config(self, args: argparse.Namespace) -> SearchConfig:
        cfg = SearchConfig.from_file(getattr(args, "config", None))
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        cfg.validate()
        return cfg

    def _training_corpus(self, cfg: SearchConfig) -> List[SilhouetteSequence]:
        return build_corpus(
            cfg.num_ids, cfg.seqs_per_id, cfg.frames, cfg.height, cfg.width,
            seed=cfg.seed, noise_prob=cfg.noise_prob
        )

    def _training_samples(self, cfg: SearchConfig):
        corpus = self._training_corpus(cfg)
        labels = label_map(corpus)
        return prepare_samples(corpus, labels, cfg.descriptor_names, threads=self.threads), len(labels)

    def _load_architecture(self, args: argparse.Namespace, cfg: SearchConfig):
        if cfg.fusion != "cell":
            return None
        path = args.arch or os.path.join(args.out, "architecture.json")
        arch = read_architecture(path)
        return arch if arch.is_discrete else discretize(arch)

    def _write_run(self, args: argparse.Namespace, cfg: SearchConfig, command: str, extra_inputs: Optional[List[str]] = None):
        inputs = [p for p in [getattr(args, "config", None)] + (extra_inputs or []) if p]
        write_config_snapshot(args.out, cfg.to_text())
        RunManifest(command, cfg.to_dict(), RunManifest.digest_inputs(inputs), seed=cfg.seed).write(args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="CLASH 步态描述子与多描述子单元架构搜索")
    parser.add_argument("--help-config", action="store_true", help="打印搜索配置文档的全部键与默认值")
    parser.add_argument("--threads", type=int, default=config.THREADS, help="transform/metrics 的逐帧并行线程数")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synthesize", help="合成步行者语料库")
    p.add_argument("--out", required=True, help="输出目录")
    p.add_argument("--config", help="key=value 配置文档")
    p.add_argument("--seed", type=int, help="覆盖配置中的 SEED")

    p = sub.add_parser("transform", help="剪影 → DSTF")
    p.add_argument("--in", dest="input", required=True, help="PGM 帧目录、含 manifest.csv 的目录或清单文件")
    p.add_argument("--out", required=True, help="输出目录")
    p.add_argument("--norm", choices=NORMALIZATIONS, default=config.DSTF_NORM, help="区域归一化范围")
    p.add_argument("--degenerate", choices=DEGENERATE_POLICIES, default=config.DSTF_DEGENERATE, help="退化帧策略")
    p.add_argument("--variant", choices=["dstf", "bidt"], default="dstf", help="bidt 为无符号对照")
    p.add_argument("--preview", action="store_true", help="同时写出 PGM 预览")

    p = sub.add_parser("metrics", help="描述子熵与帧差报告")
    p.add_argument("--sil", required=True, help="剪影语料")
    p.add_argument("--dstf", required=True, help="transform 输出目录")
    p.add_argument("--bins", type=int, default=config.ENTROPY_BINS, help="直方图箱数")
    p.add_argument("--out", required=True, help="报告 CSV 路径")

    for name, help_text in [("search", "双层架构搜索"), ("retrain", "离散架构重训练"), ("eval", "rank-1 评估")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value 配置文档")
        p.add_argument("--out", required=True, help="运行目录")
        p.add_argument("--seed", type=int, help="覆盖配置中的 SEED")
        if name in ("retrain", "eval"):
            p.add_argument("--arch", help="架构文件（默认 <out>/architecture.json）")
        if name == "eval":
            p.add_argument("--weights", help="权重文件（默认 <out>/weights.ckpt）")
            p.add_argument("--probe", choices=["heldout", "gallery"], default="heldout", help="gallery 表示探针即注册集")

    p = sub.add_parser("gradcheck", help="梯度校验")
    p.add_argument("--ops", default="all", help="all 或逗号分隔的原语/操作名")
    p.add_argument("--trials", type=int, default=20, help="每个对象的随机试验次数")
    p.add_argument("--seed", type=int, default=0, help="随机种子")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回进程退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.help_config:
        print(SearchConfig.schema_text())
        return 0
    if not args.command:
        parser.print_help()
        return 2

    try:
        # 验证配置
        config.validate()

        pipeline = ClashPipeline(threads=args.threads)
        return pipeline.run(args)

    except ConfigError as e:
        logger.error(f"配置错误 [{e.key}]: {e}")
        return e.exit_code
    except ClashError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except ValueError as e:
        logger.error(f"输入错误: {e}")
        return 2
    except Exception as e:
        logger.error(f"运行失败: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
