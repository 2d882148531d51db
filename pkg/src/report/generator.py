import os
from datetime import datetime

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


REPORT_TRANSLATIONS = {
    "EN": {
        "eval_title": "Detection Evaluation Report",
        "experiment_title": "Experiment Report",
        "date": "Date",
        "settings_header": "1. Settings",
        "summary_header": "2. Summary",
        "stat_map": "mAP",
        "stat_frames": "Frames evaluated",
        "stat_tp": "True positives",
        "stat_fp": "False positives",
        "stat_fn": "Missed objects",
        "ap_header": "3. Average Precision per Class",
        "scenario_header": "4. Scenario Breakdown",
        "no_scenario": "No scenario tags were given.",
        "table_header": "2. Comparison Table",
        "means_header": "3. Means per Variant",
        "pr_plot": "Precision-recall curve",
    },
    "KO": {
        "eval_title": "검출 성능 평가 보고서",
        "experiment_title": "실험 보고서",
        "date": "날짜",
        "settings_header": "1. 설정",
        "summary_header": "2. 요약",
        "stat_map": "mAP",
        "stat_frames": "평가된 프레임 수",
        "stat_tp": "참 양성(TP)",
        "stat_fp": "거짓 양성(FP)",
        "stat_fn": "놓친 객체(FN)",
        "ap_header": "3. 클래스별 AP",
        "scenario_header": "4. 시나리오별 결과",
        "no_scenario": "시나리오 태그가 없습니다.",
        "table_header": "2. 비교 표",
        "means_header": "3. 변형별 평균",
        "pr_plot": "정밀도-재현율 곡선",
    }
}


def _header(f, title, t, settings):
    f.write(f"# {title}\n")
    f.write(f"**{t['date']}:** {datetime.now().strftime('%Y-%m-%d %H:%M')}\n\n")
    f.write(f"## {t['settings_header']}\n")
    for k, v in (settings or {}).items():
        f.write(f"- **{k}:** {v}\n")
    f.write("\n")


def generate_eval_report(report, output_path, settings=None, lang="EN"):
    """
    Writes a markdown evaluation report.

    Args:
        report (dict): EvalReport.to_dict() output (or the report JSON loaded back).
        output_path (str): Destination .md file.
        settings (dict, optional): Extra key/value lines for the settings section.
        lang (str): "EN" or "KO".
    """
    t = REPORT_TRANSLATIONS.get(lang, REPORT_TRANSLATIONS["EN"])
    settings = dict(settings or {})
    settings.setdefault("IoU threshold", report["iou_threshold"])
    settings.setdefault("Interpolation", report["interpolation"])

    with open(output_path, 'w', encoding='utf-8') as f:
        _header(f, t["eval_title"], t, settings)

        f.write(f"## {t['summary_header']}\n")
        f.write(f"- {t['stat_map']}: {report['map']:.4f}\n")
        f.write(f"- {t['stat_frames']}: {report['frames']}\n")
        f.write(f"- {t['stat_tp']}: {report['counts']['tp']}\n")
        f.write(f"- {t['stat_fp']}: {report['counts']['fp']}\n")
        f.write(f"- {t['stat_fn']}: {report['counts']['fn']}\n")
        f.write("\n")

        f.write(f"## {t['ap_header']}\n")
        ap_df = pd.DataFrame([{"class": c, "AP": v} for c, v in report["ap"].items()])
        f.write(ap_df.to_markdown(index=False, floatfmt=".4f"))
        f.write("\n\n")

        f.write(f"## {t['scenario_header']}\n")
        if report.get("scenarios"):
            sc_df = pd.DataFrame([{"scenario": s, "mAP": v} for s, v in report["scenarios"].items()])
            f.write(sc_df.to_markdown(index=False, floatfmt=".4f"))
        else:
            f.write(f"{t['no_scenario']}\n")
        f.write("\n")

    print(f"Report saved to {output_path}")
    return output_path


def generate_experiment_report(table, output_path, preset, settings=None, lang="EN"):
    """Markdown version of an experiment comparison table with a per-variant mean section."""
    t = REPORT_TRANSLATIONS.get(lang, REPORT_TRANSLATIONS["EN"])
    settings = dict(settings or {})
    settings.setdefault("Preset", preset)

    with open(output_path, 'w', encoding='utf-8') as f:
        _header(f, f"{t['experiment_title']}: {preset}", t, settings)

        per_seed = table[table["seed"].astype(str) != "mean"]
        f.write(f"## {t['table_header']}\n")
        f.write(per_seed.to_markdown(index=False, floatfmt=".4f"))
        f.write("\n\n")

        means = table[table["seed"].astype(str) == "mean"]
        if len(means):
            f.write(f"## {t['means_header']}\n")
            f.write(means.drop(columns=["seed"]).to_markdown(index=False, floatfmt=".4f"))
            f.write("\n")

    print(f"Report saved to {output_path}")
    return output_path


def plot_pr_curves(pr_frame, output_path, lang="EN"):
    """Plots recall vs precision per class from EvalReport.pr_frame()."""
    t = REPORT_TRANSLATIONS.get(lang, REPORT_TRANSLATIONS["EN"])
    fig, ax = plt.subplots(figsize=(5, 4))
    for class_id, group in pr_frame.groupby("class_id"):
        ax.plot(group["recall"], group["precision"], label=f"class {class_id}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_title(t["pr_plot"])
    if len(pr_frame):
        ax.legend(loc="lower left")
    directory = os.path.dirname(output_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig.savefig(output_path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return output_path
