"""
配准-变化检测命令行工具
Batch commands: warpgen, register, detect, pipeline, eval, instances, bench

退出码：0 成功，1 处理错误，2 用法 / 配置错误
"""
import argparse
import logging
import sys
from typing import List, Optional

from config.settings import settings
from src.async_execution import tasks
from src.config.config_manager import PipelineConfigManager
from src.config.pipeline_config import PipelineConfig
from src.core_application.errors import EXIT_OK, EXIT_USAGE, RegCDError, exit_code_for

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="流程配置 JSON 文件（缺省使用内置默认值）")
    parser.add_argument("--out", required=True, help="输出目录")
    parser.add_argument("--seed", type=int, help="覆盖配置中的随机种子")
    parser.add_argument("--workers", type=int, help="覆盖配置中的工作线程数")
    parser.add_argument("--log-level", help="日志级别（默认取自 REGCD_LOG_LEVEL）")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=settings.app_name, description="双时相影像配准与变化检测工具")
    parser.add_argument("--version", action="version", version=settings.get_program_label())
    subparsers = parser.add_subparsers(dest="command", required=True, help="可用命令")

    warpgen = subparsers.add_parser("warpgen", help="生成带几何畸变的合成场景包")
    warpgen.add_argument("t1", help="T1 影像")
    warpgen.add_argument("t2_aligned", help="与 T1 对齐的 T2 影像")
    warpgen.add_argument("gt_change", help="变化真值（0/255）")
    warpgen.add_argument("--level", type=int, choices=[1, 2, 3], required=True, help="畸变等级")
    _add_common(warpgen)

    register = subparsers.add_parser("register", help="分层匹配 + RANSAC 配准")
    register.add_argument("t1", help="参考影像 T1")
    register.add_argument("t2", help="待配准影像 T2")
    register.add_argument("--export-fused", action="store_true", help="导出融合特征图 PNG")
    _add_common(register)

    detect = subparsers.add_parser("detect", help="对已配准影像进行变化检测")
    detect.add_argument("t1", help="参考影像 T1")
    detect.add_argument("t2_registered", help="配准后的 T2 影像")
    detect.add_argument("validity", help="有效性掩膜（255 = 有效）")
    detect.add_argument("--overlap", help="overlap.json，给定时以公共区域掩膜相乘")
    _add_common(detect)

    pipeline = subparsers.add_parser("pipeline", help="配准 + 变化检测完整流程")
    pipeline.add_argument("t1", help="参考影像 T1")
    pipeline.add_argument("t2", help="待配准影像 T2")
    pipeline.add_argument("--gt", help="变化真值，给定时在公共区域内计算指标")
    _add_common(pipeline)

    evaluate = subparsers.add_parser("eval", help="计算 Precision / Recall / F1 / IoU / OA")
    evaluate.add_argument("pred", help="预测变化图（0/255）")
    evaluate.add_argument("gt", help="变化真值（0/255）")
    evaluate.add_argument("--mask", help="评估区域掩膜（255 = 参与评估）")
    _add_common(evaluate)

    instances = subparsers.add_parser("instances", help="实例生成：候选掩膜、过滤与增强视图")
    instances.add_argument("image", help="输入影像")
    _add_common(instances)

    bench = subparsers.add_parser("bench", help="在合成语料上运行完整基准")
    bench.add_argument("--scenes", type=int, default=4, help="基础场景数量")
    bench.add_argument("--size", type=int, default=512, help="场景边长(像素)")
    bench.add_argument("--levels", type=int, nargs="+", choices=[1, 2, 3], default=[1, 2, 3], help="畸变等级")
    _add_common(bench)

    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    """加载配置文件并应用命令行覆盖项"""
    path = getattr(args, "config", None) or settings.default_config_path
    config = PipelineConfigManager(path).load_pipeline_config()
    return config.with_overrides(seed=args.seed, workers=args.workers)


def dispatch(args: argparse.Namespace) -> None:
    config = load_config(args)
    if args.command == "warpgen":
        tasks.run_warpgen(args.t1, args.t2_aligned, args.gt_change, args.level, config, args.out)
    elif args.command == "eval":
        tasks.run_eval(args.pred, args.gt, config, args.out, args.mask)
    elif args.command == "register":
        tasks.run_register(args.t1, args.t2, config, args.out, export_fused=args.export_fused)
    elif args.command == "detect":
        tasks.run_detect(args.t1, args.t2_registered, args.validity, config, args.out, args.overlap)
    elif args.command == "pipeline":
        tasks.run_pipeline(args.t1, args.t2, config, args.out, args.gt)
    elif args.command == "instances":
        tasks.run_instances(args.image, config, args.out)
    elif args.command == "bench":
        tasks.run_bench(config, args.out, n_scenes=args.scenes, size=args.size, levels=args.levels)


def main(argv: Optional[List[str]] = None) -> int:
    """命令行入口，返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    level = (args.log_level or settings.log_level).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=settings.log_format)

    try:
        dispatch(args)
    except (RegCDError, OSError) as e:
        code = exit_code_for(e)
        logger.error(f"❌ {args.command} failed ({type(e).__name__}): {e}")
        print(f"❌ 错误: {e}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
